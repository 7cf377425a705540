"""Tokenization, vocabulary, dataset files, batching, and the synthetic
substitution world.

The synthetic world is the desk-scale analogue of a lexical adversarial test
set: sentences are filler words around one content word, the hypothesis
replaces that word with a related one, and the label follows from the
relation alone. Held-out relation pairs never occur in training sentences,
so test accuracy measures behavior on unseen pairs.
"""

import logging
import string
from dataclasses import dataclass

import numpy as np

from .knowledge import (
    CONTRADICTION,
    ENTAILMENT,
    LABELS,
    LABEL_TO_ID,
    NEUTRAL,
    RelationKind,
    RelationStore,
    SUBSTITUTION_LABELS,
)

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

_STRIP_CHARS = string.punctuation

ARCHITECTURES = ("model1", "model2")


def tokenize(text):
    """Lowercase, split on whitespace, strip edge ASCII punctuation.

    Interior punctuation (hyphens, dashes inside a token) is preserved;
    tokens that strip down to nothing are dropped.
    """
    out = []
    for raw in text.lower().split():
        word = raw.strip(_STRIP_CHARS)
        if word:
            out.append(word)
    return out


class Vocabulary:
    """Word/id bijection with four fixed reserved ids; unknowns map to [UNK]."""

    def __init__(self, words=()):
        self._words = list(RESERVED_TOKENS)
        self._ids = {w: i for i, w in enumerate(self._words)}
        for w in words:
            if w in self._ids:
                raise ValueError(f"duplicate word in vocabulary: {w!r}")
            self._ids[w] = len(self._words)
            self._words.append(w)

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word in self._ids

    def id_of(self, word):
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx):
        return self._words[idx]

    def encode(self, words):
        return [self.id_of(w) for w in words]

    def decode(self, ids):
        return [self._words[i] for i in ids]

    @property
    def words(self):
        return tuple(self._words)


def build_vocab(examples, min_count=1):
    """Vocabulary over all example tokens with frequency >= min_count.

    Ids are assigned after the reserved block, most frequent first, ties
    broken lexicographically.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = {}
    for ex in examples:
        for word in (*ex.premise, *ex.hypothesis):
            counts[word] = counts.get(word, 0) + 1
    kept = [w for w, c in counts.items() if c >= min_count and w not in RESERVED_TOKENS]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


def save_vocab(vocab, path):
    """One word per line, reserved tokens first, line number = id."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in vocab.words:
            fh.write(word + "\n")


def load_vocab(path):
    with open(path, encoding="utf-8") as fh:
        words = [line.rstrip("\n") for line in fh]
    if tuple(words[:4]) != RESERVED_TOKENS:
        raise ValueError(f"{path}:1: vocabulary must start with the "
                         f"reserved tokens {RESERVED_TOKENS}")
    return Vocabulary(words[4:])


@dataclass
class Example:
    """One premise/hypothesis pair. provenance, when set, is the
    (substituted position, RelationKind) behind an adversarial example."""

    premise: list
    hypothesis: list
    label: str
    provenance: tuple = None

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise ValueError("premise and hypothesis must be non-empty")
        if self.label not in LABELS:
            raise ValueError(f"bad label {self.label!r}, expected one of {LABELS}")


def load_tsv(path, strict=False):
    """Read `label<TAB>premise<TAB>hypothesis` lines into Examples.

    Sentences are tokenized on read. Malformed lines (wrong column count,
    unknown label, empty sentence) are skipped with a logged line number,
    or abort in strict mode.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                _reject(path, lineno, f"expected 3 columns, got {len(fields)}", strict)
                continue
            label, premise, hypothesis = fields
            label = label.strip()
            if label not in LABELS:
                _reject(path, lineno, f"unknown label {label!r}", strict)
                continue
            p, h = tokenize(premise), tokenize(hypothesis)
            if not p or not h:
                _reject(path, lineno, "empty sentence after tokenization", strict)
                continue
            examples.append(Example(p, h, label))
    return examples


def _reject(path, lineno, reason, strict):
    message = f"{path}:{lineno}: {reason}"
    if strict:
        raise ValueError(message)
    logger.warning("skipping line: %s", message)


def save_tsv(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{' '.join(ex.premise)}\t{' '.join(ex.hypothesis)}\n")


@dataclass
class Batch:
    """Padded, id-encoded batch. Model I rows keep premise and hypothesis
    separate; Model II rows hold the [CLS] p [SEP] h [SEP] layout. The
    padded word lists are kept for bias-matrix construction."""

    labels: np.ndarray
    truncated: int = 0
    # model1 layout
    premise_ids: np.ndarray = None
    premise_mask: np.ndarray = None
    premise_positions: np.ndarray = None
    premise_words: list = None
    hypothesis_ids: np.ndarray = None
    hypothesis_mask: np.ndarray = None
    hypothesis_positions: np.ndarray = None
    hypothesis_words: list = None
    # model2 layout
    concat_ids: np.ndarray = None
    concat_mask: np.ndarray = None
    concat_positions: np.ndarray = None
    concat_words: list = None
    segment_ids: np.ndarray = None

    def __len__(self):
        return len(self.labels)


def _pad_block(sentences, vocab):
    """Id/mask/position matrices plus [PAD]-extended word rows."""
    width = max(len(s) for s in sentences)
    n = len(sentences)
    ids = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.float64)
    words = []
    for i, sent in enumerate(sentences):
        ids[i, :len(sent)] = vocab.encode(sent)
        mask[i, :len(sent)] = 1.0
        words.append(list(sent) + [PAD] * (width - len(sent)))
    positions = np.tile(np.arange(width, dtype=np.int64), (n, 1))
    return ids, mask, positions, words


def encode_batch(examples, vocab, architecture, max_len=None):
    """Pad a list of Examples into a Batch for the given architecture.

    Sentences longer than max_len are tail-truncated, never rejected; the
    count of truncated sentences is surfaced on the batch.
    """
    if not examples:
        raise ValueError("encode_batch needs a non-empty example list")
    if architecture not in ARCHITECTURES:
        raise ValueError(f"architecture must be one of {ARCHITECTURES}")
    truncated = 0
    premises, hypotheses = [], []
    for ex in examples:
        p, h = ex.premise, ex.hypothesis
        if max_len is not None:
            if len(p) > max_len:
                p = p[:max_len]
                truncated += 1
            if len(h) > max_len:
                h = h[:max_len]
                truncated += 1
        premises.append(p)
        hypotheses.append(h)
    if truncated:
        logger.warning("truncated %d sentences to max_len=%d", truncated, max_len)
    labels = np.array([LABEL_TO_ID[ex.label] for ex in examples], dtype=np.int64)

    if architecture == "model1":
        p_ids, p_mask, p_pos, p_words = _pad_block(premises, vocab)
        h_ids, h_mask, h_pos, h_words = _pad_block(hypotheses, vocab)
        return Batch(labels=labels, truncated=truncated,
                     premise_ids=p_ids, premise_mask=p_mask,
                     premise_positions=p_pos, premise_words=p_words,
                     hypothesis_ids=h_ids, hypothesis_mask=h_mask,
                     hypothesis_positions=h_pos, hypothesis_words=h_words)

    rows = []
    segments = []
    for p, h in zip(premises, hypotheses):
        rows.append([CLS, *p, SEP, *h, SEP])
        segments.append([0] * (len(p) + 2) + [1] * (len(h) + 1))
    width = max(len(r) for r in rows)
    n = len(rows)
    ids = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.float64)
    seg = np.zeros((n, width), dtype=np.int64)
    words = []
    for i, (row, s) in enumerate(zip(rows, segments)):
        ids[i, :len(row)] = vocab.encode(row)
        mask[i, :len(row)] = 1.0
        seg[i, :len(s)] = s
        words.append(row + [PAD] * (width - len(row)))
    positions = np.tile(np.arange(width, dtype=np.int64), (n, 1))
    return Batch(labels=labels, truncated=truncated,
                 concat_ids=ids, concat_mask=mask, concat_positions=positions,
                 concat_words=words, segment_ids=seg)


# -- synthetic world -----------------------------------------------------------


@dataclass
class SyntheticWorld:
    """Content vocabulary, its relation store, and the train/test split of
    relation pairs. Test pairs never appear in training examples."""

    content_words: list
    filler_words: list
    store: RelationStore
    train_pairs: dict
    test_pairs: dict

    def all_pairs(self, split):
        """Flat (subject, object) list over all kinds for 'train' or 'test'."""
        source = self.train_pairs if split == "train" else self.test_pairs
        out = []
        for kind in RelationKind:
            out.extend(source[kind])
        return out


def gen_world(seed, n_words=200, pairs_per_relation=40, n_fillers=30,
              train_fraction=0.7):
    """Sample a relation world: per kind, pairs_per_relation word pairs with
    no pair (in either direction) reused across kinds, split 70/30 into
    train/test substitution pairs."""
    total = 5 * pairs_per_relation
    if n_words < 10 or 2 * total > n_words * (n_words - 1) // 2:
        raise ValueError(
            f"{n_words} words cannot host {total} relation pairs without reuse"
        )
    rng = np.random.default_rng(seed)
    content = [f"w{i:03d}" for i in range(n_words)]
    fillers = [f"f{i:02d}" for i in range(n_fillers)]
    store = RelationStore()
    pairs = {}
    attempts_left = 1000 * total
    for kind in RelationKind:
        chosen = []
        while len(chosen) < pairs_per_relation:
            if attempts_left == 0:
                raise ValueError("could not sample disjoint relation pairs")
            attempts_left -= 1
            i, j = rng.integers(0, n_words, size=2)
            if i == j:
                continue
            a, b = content[i], content[j]
            if store.query(a, b) or store.query(b, a):
                continue
            store.add(kind, a, b)
            chosen.append((a, b))
        pairs[kind] = chosen
    n_train = int(round(train_fraction * pairs_per_relation))
    train_pairs, test_pairs = {}, {}
    for kind in RelationKind:
        order = rng.permutation(pairs_per_relation)
        shuffled = [pairs[kind][i] for i in order]
        train_pairs[kind] = shuffled[:n_train]
        test_pairs[kind] = shuffled[n_train:]
    return SyntheticWorld(content, fillers, store, train_pairs, test_pairs)


# (kind, reversed) choices that realize each label under the substitution
# recipe. Reversed means the stored pair (a, b) is used as w_p=b, w_h=a.
_LABEL_SOURCES = {
    ENTAILMENT: ((RelationKind.SYNONYM, False), (RelationKind.SYNONYM, True),
                 (RelationKind.HYPONYM, False), (RelationKind.HYPERNYM, True)),
    NEUTRAL: ((RelationKind.HYPERNYM, False), (RelationKind.HYPONYM, True)),
    CONTRADICTION: ((RelationKind.ANTONYM, False), (RelationKind.ANTONYM, True),
                    (RelationKind.CO_HYPONYM, False), (RelationKind.CO_HYPONYM, True)),
}
_MIRROR_KIND = {RelationKind.HYPERNYM: RelationKind.HYPONYM,
                RelationKind.HYPONYM: RelationKind.HYPERNYM}


def _make_example(rng, world, pairs, label, template_len):
    kind, rev = _LABEL_SOURCES[label][rng.integers(0, len(_LABEL_SOURCES[label]))]
    pool = pairs[kind]
    a, b = pool[rng.integers(0, len(pool))]
    w_p, w_h = (b, a) if rev else (a, b)
    effective = _MIRROR_KIND.get(kind, kind) if rev else kind
    slot = int(rng.integers(0, template_len))
    sentence = [world.filler_words[i]
                for i in rng.integers(0, len(world.filler_words), size=template_len)]
    sentence[slot] = w_p
    hypothesis = list(sentence)
    hypothesis[slot] = w_h
    assert SUBSTITUTION_LABELS[effective] == label
    return Example(sentence, hypothesis, label, provenance=(slot, effective))


def gen_examples(world, seed, n_train, n_test, template_len=7, test_ratio=None):
    """Generate substitution examples; train from train pairs, test from the
    held-out pairs.

    Train labels are balanced by cycling entailment/neutral/contradiction.
    test_ratio, when given, is an (entailment, neutral, contradiction)
    weight triple for skewed test sets.
    """
    rng = np.random.default_rng(seed)
    train = [_make_example(rng, world, world.train_pairs, LABELS[i % 3], template_len)
             for i in range(n_train)]
    if test_ratio is None:
        test = [_make_example(rng, world, world.test_pairs, LABELS[i % 3], template_len)
                for i in range(n_test)]
    else:
        weights = np.asarray(test_ratio, dtype=np.float64)
        if weights.shape != (3,) or (weights < 0).any() or weights.sum() == 0:
            raise ValueError("test_ratio must be 3 non-negative weights")
        weights = weights / weights.sum()
        picks = rng.choice(3, size=n_test, p=weights)
        test = [_make_example(rng, world, world.test_pairs, LABELS[i], template_len)
                for i in picks]
    return train, test


# Priority order used to pick one relation for labeling when a pair holds
# several; it mirrors the rule baseline's check order.
_RULE_ORDER = (RelationKind.HYPONYM, RelationKind.SYNONYM, RelationKind.HYPERNYM,
               RelationKind.ANTONYM, RelationKind.CO_HYPONYM)


def adversarial_substitute(example, world, pair_set):
    """Rebuild the hypothesis by substituting the first premise word that
    appears as a subject in pair_set; returns None when nothing applies.

    pair_set is an iterable of oriented (w_p, w_h) pairs. The label comes
    from the store relation of the chosen pair; provenance records the
    substituted position and that relation.
    """
    index = {}
    for w_p, w_h in pair_set:
        index.setdefault(w_p, []).append(w_h)
    for pos, word in enumerate(example.premise):
        for w_h in index.get(word, ()):
            rels = world.store.query(word, w_h)
            kind = next((k for k in _RULE_ORDER if k in rels), None)
            if kind is None:
                continue
            hypothesis = list(example.premise)
            hypothesis[pos] = w_h
            return Example(list(example.premise), hypothesis,
                           SUBSTITUTION_LABELS[kind], provenance=(pos, kind))
    return None
