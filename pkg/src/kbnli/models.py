"""The two NLI architectures, parameter init, and checkpoint files.

Model I encodes premise and hypothesis with two separate encoder stacks,
lets each side attend to the other through decoder-style cross-encoder
stacks (where relation bias can enter), pools max+mean per sentence, and
classifies the concatenation. Model II runs one encoder over the
[CLS] p [SEP] h [SEP] concatenation with segment embeddings, biases the
self-attention of chosen layers (cross-segment word pairs only), and
classifies the final [CLS] vector.
"""

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import ARCHITECTURES, CLS_ID, SEP_ID, Example, Vocabulary, encode_batch
from .knowledge import BiasStack, build_bias_concat, build_bias_cross
from .layers import (
    CrossEncoderLayerParams,
    EncoderLayerParams,
    cross_encoder_layer,
    encoder_layer,
    init_cross_encoder_layer,
    init_encoder_layer,
    init_weight,
)
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    embedding,
    finite_diff_check,
    masked_max,
    masked_mean,
    matmul,
    take_position,
    tanh,
)

CHECKPOINT_MAGIC = b"KBA1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. modified_layers holds the 1-based
    indices of the layers that receive relation bias: cross-encoder layers
    for model1, encoder layers for model2."""

    architecture: str = "model1"
    n_layers: int = 1
    n_cross: int = 1
    heads: int = 5
    d_model: int = 300
    d_ff: int = None
    bias_b: float = 10.0
    modified_layers: frozenset = frozenset()
    vocab_size: int = 4
    max_positions: int = 64
    n_labels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.d_ff is None:
            default_ff = 512 if self.architecture == "model1" else 4 * self.d_model
            object.__setattr__(self, "d_ff", default_ff)
        object.__setattr__(self, "modified_layers", frozenset(int(i) for i in self.modified_layers))
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by heads ({self.heads})"
            )
        if self.n_layers < 1 or (self.architecture == "model1" and self.n_cross < 1):
            raise ValueError("layer counts must be >= 1")
        top = self.n_cross if self.architecture == "model1" else self.n_layers
        bad = [i for i in self.modified_layers if not (1 <= i <= top)]
        if bad:
            raise ValueError(
                f"modified_layers {sorted(bad)} outside 1..{top} for {self.architecture}"
            )
        if self.vocab_size < 4 or self.max_positions < 1 or self.n_labels < 2:
            raise ValueError("vocab_size >= 4, max_positions >= 1, n_labels >= 2 required")


_CONFIG_FIELDS = ("architecture", "n_layers", "n_cross", "heads", "d_model",
                  "d_ff", "bias_b", "modified_layers", "vocab_size",
                  "max_positions", "n_labels", "seed")


def config_to_text(config):
    """Canonical key=value serialization (stable order, full float precision)."""
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "modified_layers":
            value = ",".join(str(i) for i in sorted(value))
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    raw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    missing = [k for k in _CONFIG_FIELDS if k not in raw]
    if missing:
        raise ValueError(f"config text missing keys: {missing}")
    layers = frozenset(int(x) for x in raw["modified_layers"].split(",") if x)
    return ModelConfig(
        architecture=raw["architecture"],
        n_layers=int(raw["n_layers"]),
        n_cross=int(raw["n_cross"]),
        heads=int(raw["heads"]),
        d_model=int(raw["d_model"]),
        d_ff=int(raw["d_ff"]),
        bias_b=float(raw["bias_b"]),
        modified_layers=layers,
        vocab_size=int(raw["vocab_size"]),
        max_positions=int(raw["max_positions"]),
        n_labels=int(raw["n_labels"]),
        seed=int(raw["seed"]),
    )


@dataclass
class ClassifierParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix=""):
        yield f"{prefix}w1", self.w1
        yield f"{prefix}b1", self.b1
        yield f"{prefix}w2", self.w2
        yield f"{prefix}b2", self.b2


@dataclass
class ModelIParams:
    word_emb: Tensor
    pos_emb: Tensor
    premise_layers: list
    hypothesis_layers: list
    premise_cross: list
    hypothesis_cross: list
    classifier: ClassifierParams

    def named(self):
        yield "word_emb", self.word_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.premise_layers):
            yield from layer.named(f"enc_p{i}.")
        for i, layer in enumerate(self.hypothesis_layers):
            yield from layer.named(f"enc_h{i}.")
        for i, layer in enumerate(self.premise_cross):
            yield from layer.named(f"cross_p{i}.")
        for i, layer in enumerate(self.hypothesis_cross):
            yield from layer.named(f"cross_h{i}.")
        yield from self.classifier.named("cls.")


@dataclass
class ModelIIParams:
    word_emb: Tensor
    pos_emb: Tensor
    seg_emb: Tensor
    layers: list
    classifier: ClassifierParams

    def named(self):
        yield "word_emb", self.word_emb
        yield "pos_emb", self.pos_emb
        yield "seg_emb", self.seg_emb
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"enc{i}.")
        yield from self.classifier.named("cls.")


def _init_classifier(rng, width_in, width_hidden, n_labels, scale):
    return ClassifierParams(
        w1=init_weight(rng, (width_in, width_hidden), scale),
        b1=Tensor(np.zeros(width_hidden), requires_grad=True),
        w2=init_weight(rng, (width_hidden, n_labels), scale),
        b2=Tensor(np.zeros(n_labels), requires_grad=True),
    )


def init_params(config, seed=None, scale=0.02):
    """Gaussian N(0, scale^2) weights and embeddings, zero biases, unit
    layer-norm gains; fully determined by the seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    word_emb = init_weight(rng, (config.vocab_size, config.d_model), scale)
    pos_emb = init_weight(rng, (config.max_positions, config.d_model), scale)
    if config.architecture == "model1":
        return ModelIParams(
            word_emb=word_emb,
            pos_emb=pos_emb,
            premise_layers=[init_encoder_layer(rng, config.d_model, config.heads,
                                               config.d_ff, scale)
                            for _ in range(config.n_layers)],
            hypothesis_layers=[init_encoder_layer(rng, config.d_model, config.heads,
                                                  config.d_ff, scale)
                               for _ in range(config.n_layers)],
            premise_cross=[init_cross_encoder_layer(rng, config.d_model, config.heads,
                                                    config.d_ff, scale)
                           for _ in range(config.n_cross)],
            hypothesis_cross=[init_cross_encoder_layer(rng, config.d_model, config.heads,
                                                       config.d_ff, scale)
                              for _ in range(config.n_cross)],
            classifier=_init_classifier(rng, 4 * config.d_model, 4 * config.d_model,
                                        config.n_labels, scale),
        )
    return ModelIIParams(
        word_emb=word_emb,
        pos_emb=pos_emb,
        seg_emb=init_weight(rng, (2, config.d_model), scale),
        layers=[init_encoder_layer(rng, config.d_model, config.heads,
                                   config.d_ff, scale)
                for _ in range(config.n_layers)],
        classifier=_init_classifier(rng, config.d_model, 4 * config.d_model,
                                    config.n_labels, scale),
    )


def embed_sequence(params, token_ids, positions, segment_ids=None):
    """Word + positional (+ segment) embedding sum; ids are range-checked."""
    out = embedding(params.word_emb, token_ids) + embedding(params.pos_emb, positions)
    if segment_ids is not None:
        out = out + embedding(params.seg_emb, segment_ids)
    return out


def classify(sentence_vec, params):
    """tanh(x w1 + b1) w2 + b2."""
    hidden = tanh(matmul(sentence_vec, params.w1) + params.b1)
    return matmul(hidden, params.w2) + params.b2


def _check_bias_keys(bias, config):
    if bias and set(bias.keys()) != set(config.modified_layers):
        raise ValueError(
            f"bias stacks for layers {sorted(bias.keys())} do not match "
            f"modified_layers {sorted(config.modified_layers)}"
        )


def model1_forward(params, config, batch, bias_premise=None, bias_hypothesis=None):
    """Decomposable forward pass: separate encoders, cross-encoders with
    optional per-layer bias, masked max+mean pooling, joint classifier.

    bias_premise/bias_hypothesis map 1-based cross-layer indices to batched
    BiasStacks (premise-as-query and hypothesis-as-query respectively).
    """
    _check_bias_keys(bias_premise, config)
    _check_bias_keys(bias_hypothesis, config)
    p_mask, h_mask = batch.premise_mask, batch.hypothesis_mask
    p = embed_sequence(params, batch.premise_ids, batch.premise_positions)
    h = embed_sequence(params, batch.hypothesis_ids, batch.hypothesis_positions)
    for layer in params.premise_layers:
        p = encoder_layer(p, layer, pad_mask=p_mask[:, None, :])
    for layer in params.hypothesis_layers:
        h = encoder_layer(h, layer, pad_mask=h_mask[:, None, :])
    p_cross, h_cross = p, h
    for idx, layer in enumerate(params.premise_cross, start=1):
        stack = bias_premise.get(idx) if bias_premise else None
        p_cross = cross_encoder_layer(p_cross, h, layer,
                                      x_mask=p_mask[:, None, :],
                                      mem_mask=h_mask[:, None, :],
                                      bias_stack=stack)
    for idx, layer in enumerate(params.hypothesis_cross, start=1):
        stack = bias_hypothesis.get(idx) if bias_hypothesis else None
        h_cross = cross_encoder_layer(h_cross, p, layer,
                                      x_mask=h_mask[:, None, :],
                                      mem_mask=p_mask[:, None, :],
                                      bias_stack=stack)
    p_sent = concat([masked_max(p_cross, p_mask), masked_mean(p_cross, p_mask)])
    h_sent = concat([masked_max(h_cross, h_mask), masked_mean(h_cross, h_mask)])
    return classify(concat([p_sent, h_sent]), params.classifier)


def _check_concat_layout(batch):
    ids, mask, seg = batch.concat_ids, batch.concat_mask, batch.segment_ids
    for row in range(ids.shape[0]):
        real = mask[row] > 0
        toks = ids[row][real]
        segs = seg[row][real]
        seps = np.flatnonzero(toks == SEP_ID)
        if toks[0] != CLS_ID or len(seps) != 2 or seps[1] != len(toks) - 1:
            raise ValueError(
                f"row {row}: layout must be [CLS] premise [SEP] hypothesis [SEP]"
            )
        boundary = seps[0]
        if not ((segs[:boundary + 1] == 0).all() and (segs[boundary + 1:] == 1).all()):
            raise ValueError(f"row {row}: segment ids must be 0 through the first "
                             "[SEP], then 1")


def model2_forward(params, config, batch, bias=None):
    """Concatenated-encoder forward pass; bias maps 1-based encoder layer
    indices to batched BiasStacks over the full sequence."""
    _check_bias_keys(bias, config)
    _check_concat_layout(batch)
    x = embed_sequence(params, batch.concat_ids, batch.concat_positions,
                       segment_ids=batch.segment_ids)
    for idx, layer in enumerate(params.layers, start=1):
        stack = bias.get(idx) if bias else None
        x = encoder_layer(x, layer, pad_mask=batch.concat_mask[:, None, :],
                          bias_stack=stack)
    return classify(take_position(x, 0), params.classifier)


# -- batched bias construction -------------------------------------------------


def build_bias_model1(store, batch, config, assignment=None):
    """Per-layer batched bias stacks for both cross-encoder directions.

    Returns (bias_premise, bias_hypothesis) dicts, or (None, None) when no
    layer is modified or the store is missing. The same relation matrices
    serve every modified layer.
    """
    if store is None or not config.modified_layers:
        return None, None
    fwd, rev = [], []
    for p_words, h_words in zip(batch.premise_words, batch.hypothesis_words):
        fwd.append(build_bias_cross(store, p_words, h_words, assignment=assignment,
                                    b=config.bias_b, heads=config.heads).matrices)
        rev.append(build_bias_cross(store, h_words, p_words, assignment=assignment,
                                    b=config.bias_b, heads=config.heads).matrices)
    stack_p = BiasStack(np.stack(fwd, axis=1), b=config.bias_b)
    stack_h = BiasStack(np.stack(rev, axis=1), b=config.bias_b)
    bias_p = {idx: stack_p for idx in config.modified_layers}
    bias_h = {idx: stack_h for idx in config.modified_layers}
    return bias_p, bias_h


def build_bias_model2(store, batch, config, assignment=None):
    """Per-layer batched bias stacks over the concatenated layout, or None."""
    if store is None or not config.modified_layers:
        return None
    mats = []
    for words, segs in zip(batch.concat_words, batch.segment_ids):
        mats.append(build_bias_concat(store, words, [int(s) for s in segs],
                                      assignment=assignment, b=config.bias_b,
                                      heads=config.heads).matrices)
    stack = BiasStack(np.stack(mats, axis=1), b=config.bias_b)
    return {idx: stack for idx in config.modified_layers}


def forward(params, config, batch, store=None, use_knowledge=True, assignment=None):
    """Architecture dispatch: build bias stacks from the store (when enabled
    and modified_layers is non-empty) and run the right forward pass."""
    active_store = store if use_knowledge else None
    if config.architecture == "model1":
        bias_p, bias_h = build_bias_model1(active_store, batch, config, assignment)
        return model1_forward(params, config, batch, bias_p, bias_h)
    bias = build_bias_model2(active_store, batch, config, assignment)
    return model2_forward(params, config, batch, bias)


# -- checkpointing --------------------------------------------------------------


def save_checkpoint(params, config, path):
    """Binary checkpoint: magic, version, config text, named float64 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_bytes = config_to_text(config).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    entries = list(params.named())
    buf.write(struct.pack("<I", len(entries)))
    for name, tensor in entries:
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        arr = tensor.data
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint back into (params, config); bit-exact round trip."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {version}"
            )
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = config_from_text(_read_exact(fh, config_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        loaded = {}
        order = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dimension"))[0]
                for _ in range(rank)
            )
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * n_items, f"data of {name}")
            loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            order.append(name)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last parameter")
    params = init_params(config)
    expected = [name for name, _ in params.named()]
    if order != expected:
        raise ValueError(
            f"{path}: parameter names do not match the config's architecture"
        )
    for name, tensor in params.named():
        if loaded[name].shape != tensor.data.shape:
            raise ValueError(
                f"{path}: {name} has shape {loaded[name].shape}, "
                f"config implies {tensor.data.shape}"
            )
        tensor.data = loaded[name]
    return params, config


def load_word_vectors(path, vocab, table):
    """Overwrite table rows with vectors from a GloVe-style text file.

    Each line: word then d_model space-separated reals. Words absent from
    the vocabulary are ignored; vocabulary words absent from the file keep
    their current (random) rows. Returns the number of rows replaced.
    """
    d_model = table.data.shape[1]
    coverage = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != d_model:
                raise ValueError(
                    f"{path}:{lineno}: expected {d_model} values, got {len(values)}"
                )
            if word in vocab:
                table.data[vocab.id_of(word)] = [float(v) for v in values]
                coverage += 1
    return coverage


# -- gradient verification -------------------------------------------------------


def _tiny_batch(config, rng):
    words = [f"t{i}" for i in range(8)]
    vocab = Vocabulary(words)
    lengths = rng.integers(2, 6, size=4)
    sentences = [[words[i] for i in rng.integers(0, len(words), size=n)]
                 for n in lengths]
    examples = [
        Example(sentences[0], sentences[1], "entailment"),
        Example(sentences[2], sentences[3], "contradiction"),
    ]
    return encode_batch(examples, vocab, config.architecture), vocab


def gradient_check(config, seed=0, min_samples=200, h=1e-5, store=None):
    """Finite-difference check over >= min_samples parameter coordinates.

    Builds a small random batch, spreads the coordinate budget across all
    parameter tensors, and returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    if config.vocab_size < 12:
        config = replace(config, vocab_size=12)
    params = init_params(config, seed=seed, scale=0.1)
    batch, _ = _tiny_batch(config, rng)

    def loss(_):
        logits = forward(params, config, batch, store=store,
                         use_knowledge=store is not None)
        return cross_entropy(logits, batch.labels)

    tensors = list(params.named())
    per_tensor = max(1, (min_samples + len(tensors) - 1) // len(tensors))
    worst = 0.0
    for i, (name, tensor) in enumerate(tensors):
        rel = finite_diff_check(loss, tensor, h=h, max_samples=per_tensor,
                                seed=seed + i, noise_floor=1e-6)
        worst = max(worst, rel)
    return worst
