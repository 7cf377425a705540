"""Lexical relation store, per-head attention bias matrices, and the relation
rule baseline.

Relations are directed: the stored key is (subject, object) meaning "subject
is <kind> of object". Symmetric kinds (synonym, antonym, co-hyponym) are kept
in both directions; hypernym/hyponym entries always carry their mirror.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

logger = logging.getLogger(__name__)

ENTAILMENT = "entailment"
NEUTRAL = "neutral"
CONTRADICTION = "contradiction"
ABSTAIN = "abstain"

# Class order used everywhere metrics are reported.
LABELS = (ENTAILMENT, NEUTRAL, CONTRADICTION)
LABEL_TO_ID = {label: i for i, label in enumerate(LABELS)}

SPECIAL_TOKENS = frozenset({"[PAD]", "[UNK]", "[CLS]", "[SEP]"})


class RelationKind(IntEnum):
    """The five lexical relations. Ordinals are fixed: they double as the
    default head assignment, so their order must never change."""

    SYNONYM = 0
    HYPERNYM = 1
    HYPONYM = 2
    ANTONYM = 3
    CO_HYPONYM = 4


RELATION_NAMES = {
    "synonym": RelationKind.SYNONYM,
    "hypernym": RelationKind.HYPERNYM,
    "hyponym": RelationKind.HYPONYM,
    "antonym": RelationKind.ANTONYM,
    "co-hyponym": RelationKind.CO_HYPONYM,
}
KIND_NAMES = {kind: name for name, kind in RELATION_NAMES.items()}

_SYMMETRIC = frozenset({RelationKind.SYNONYM, RelationKind.ANTONYM, RelationKind.CO_HYPONYM})
_MIRROR = {RelationKind.HYPERNYM: RelationKind.HYPONYM,
           RelationKind.HYPONYM: RelationKind.HYPERNYM}

# Label assigned when the premise word w_p is replaced by w_h and
# query(w_p, w_h) holds exactly the given kind. Replacing by a synonym or by
# a hypernym of w_p (w_p hyponym-of w_h) entails; replacing by a hyponym of
# w_p (w_p hypernym-of w_h) is neutral; antonyms and co-hyponyms contradict.
SUBSTITUTION_LABELS = {
    RelationKind.SYNONYM: ENTAILMENT,
    RelationKind.HYPONYM: ENTAILMENT,
    RelationKind.HYPERNYM: NEUTRAL,
    RelationKind.ANTONYM: CONTRADICTION,
    RelationKind.CO_HYPONYM: CONTRADICTION,
}

# Default relation-to-head assignment: ordinal i goes to head i. Heads >= 5
# stay unbiased.
DEFAULT_ASSIGNMENT = {kind: int(kind) for kind in RelationKind}

_EMPTY = frozenset()


def _norm(word):
    return word.lower()


class RelationStore:
    """Directed (word, word) -> set of RelationKind database.

    Immutable by convention after loading; safe for concurrent reads.
    """

    def __init__(self):
        self._pairs = {}

    def __len__(self):
        return len(self._pairs)

    def add(self, kind, subject, obj):
        """Insert "subject is <kind> of obj", maintaining symmetry/mirrors."""
        a, b = _norm(subject), _norm(obj)
        if a == b and kind in (RelationKind.ANTONYM, RelationKind.CO_HYPONYM):
            raise ValueError(f"{KIND_NAMES[kind]} cannot relate {a!r} to itself")
        self._insert(a, b, kind)
        if kind in _SYMMETRIC:
            self._insert(b, a, kind)
        elif kind in _MIRROR:
            self._insert(b, a, _MIRROR[kind])

    def _insert(self, a, b, kind):
        key = (a, b)
        rels = self._pairs.get(key)
        if rels is None:
            rels = set()
            self._pairs[key] = rels
        rels.add(kind)

    def query(self, w1, w2):
        """Relations of the ordered pair (w1, w2); empty frozenset if none."""
        rels = self._pairs.get((_norm(w1), _norm(w2)))
        return frozenset(rels) if rels else _EMPTY

    def stats(self):
        """Distinct ordered-pair counts per kind."""
        counts = {kind: 0 for kind in RelationKind}
        for rels in self._pairs.values():
            for kind in rels:
                counts[kind] += 1
        return counts

    def ordered_pairs(self):
        """All (kind, subject, object) entries, deterministically sorted."""
        out = []
        for (a, b), rels in self._pairs.items():
            for kind in rels:
                out.append((kind, a, b))
        out.sort(key=lambda item: (int(item[0]), item[1], item[2]))
        return out


def load_relations(path, strict=False):
    """Load a TAB-separated relation file into a RelationStore.

    Format: ``relation<TAB>subject<TAB>object`` per line, relation being one
    of synonym/hypernym/hyponym/antonym/co-hyponym. ``#`` lines are comments.
    Bad lines are skipped with a logged line number, or raise when strict.
    """
    store = RelationStore()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                _reject(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}", strict)
                continue
            name, subject, obj = fields
            kind = RELATION_NAMES.get(name.strip().lower())
            if kind is None:
                _reject(path, lineno, f"unknown relation {name!r}", strict)
                continue
            try:
                store.add(kind, subject.strip(), obj.strip())
            except ValueError as err:
                _reject(path, lineno, str(err), strict)
    counts = store.stats()
    logger.info(
        "loaded relations: %s",
        ", ".join(f"{KIND_NAMES[k]}={v}" for k, v in counts.items()),
    )
    return store


def _reject(path, lineno, reason, strict):
    message = f"{path}:{lineno}: {reason}"
    if strict:
        raise ValueError(message)
    logger.warning("skipping line: %s", message)


def save_relations(store, path):
    """Write every ordered entry; reloading reconstructs an identical store."""
    with open(path, "w", encoding="utf-8") as fh:
        for kind, a, b in store.ordered_pairs():
            fh.write(f"{KIND_NAMES[kind]}\t{a}\t{b}\n")


@dataclass
class BiasStack:
    """Per-head 0/1 bias matrices aligned to a (query, key) token pair.

    matrices has shape (heads, query_len, key_len), or (heads, batch,
    query_len, key_len) for a batch; cell [i, ..., p, q] = 1 marks that the
    word pair (query p, key q) holds the relation assigned to head i.
    """

    matrices: np.ndarray
    assignment: dict = field(default_factory=lambda: dict(DEFAULT_ASSIGNMENT))
    b: float = 10.0

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.ndim not in (3, 4):
            raise ValueError(
                f"bias stack must be (heads, [batch,] lq, lk), got {self.matrices.shape}"
            )
        if not np.isin(self.matrices, (0.0, 1.0)).all():
            raise ValueError("bias matrices must contain only 0/1 entries")

    @property
    def heads(self):
        return self.matrices.shape[0]


def _check_assignment(assignment, heads):
    values = list(assignment.values())
    if len(set(values)) != len(values):
        raise ValueError("relation-to-head assignment maps two relations to one head")
    if any(not (0 <= v < heads) for v in values):
        raise ValueError(f"head index out of range for {heads} heads: {assignment}")
    missing = [k for k in RelationKind if k not in assignment]
    if missing:
        raise ValueError(f"assignment missing kinds: {missing}")


def build_bias_cross(store, query_tokens, key_tokens, assignment=None, b=10.0,
                     heads=None, special_tokens=SPECIAL_TOKENS):
    """Bias stack for one sentence attending to another.

    The query token is the relation subject: B_i[p, q] = 1 iff some relation
    of (query_tokens[p], key_tokens[q]) is assigned to head i. Special/pad
    tokens never emit or receive bias.
    """
    if assignment is None:
        assignment = DEFAULT_ASSIGNMENT
    if heads is None:
        heads = max(assignment.values()) + 1
    _check_assignment(assignment, heads)
    mats = np.zeros((heads, len(query_tokens), len(key_tokens)))
    for p, wq in enumerate(query_tokens):
        if wq in special_tokens:
            continue
        for q, wk in enumerate(key_tokens):
            if wk in special_tokens:
                continue
            for kind in store.query(wq, wk):
                head = assignment.get(kind)
                if head is not None:
                    mats[head, p, q] = 1.0
    return BiasStack(mats, dict(assignment), b)


def build_bias_concat(store, tokens, segment_ids, assignment=None, b=10.0,
                      heads=None, special_tokens=SPECIAL_TOKENS):
    """Square bias stack for a concatenated two-segment sequence.

    A cell is set only when the two positions sit in different segments and
    neither is a special token; within-segment word pairs never get bias.
    """
    if len(tokens) != len(segment_ids):
        raise ValueError(
            f"tokens ({len(tokens)}) and segment_ids ({len(segment_ids)}) differ in length"
        )
    if any(s not in (0, 1) for s in segment_ids):
        raise ValueError("segment ids must be 0 or 1")
    if assignment is None:
        assignment = DEFAULT_ASSIGNMENT
    if heads is None:
        heads = max(assignment.values()) + 1
    _check_assignment(assignment, heads)
    n = len(tokens)
    mats = np.zeros((heads, n, n))
    for p in range(n):
        if tokens[p] in special_tokens:
            continue
        for q in range(n):
            if segment_ids[p] == segment_ids[q] or tokens[q] in special_tokens:
                continue
            for kind in store.query(tokens[p], tokens[q]):
                head = assignment.get(kind)
                if head is not None:
                    mats[head, p, q] = 1.0
    return BiasStack(mats, dict(assignment), b)


def wordnet_rule_predict(store, pair):
    """Rule-baseline label for an (original, replacement) word pair.

    Checks run in a fixed order: entailment (w_p hyponym of w_h, or
    synonyms), then neutral (w_p hypernym of w_h), then contradiction
    (antonyms or co-hyponyms). Unrelated pairs abstain.
    """
    w_p, w_h = pair
    rels = store.query(w_p, w_h)
    if RelationKind.HYPONYM in rels or RelationKind.SYNONYM in rels:
        return ENTAILMENT
    if RelationKind.HYPERNYM in rels:
        return NEUTRAL
    if RelationKind.ANTONYM in rels or RelationKind.CO_HYPONYM in rels:
        return CONTRADICTION
    return ABSTAIN
