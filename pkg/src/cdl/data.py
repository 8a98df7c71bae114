"""Loading, validation, corruption, splitting, and synthesis of ratings and content.

File formats are plain UTF-8 text:

* ratings:    one ``user<TAB>item`` pair per line; an optional leading
              ``# users=I items=J`` header pins the matrix shape.
* content:    ``item<TAB>word<TAB>count`` triples with positive counts.
* vocabulary: ``token<TAB>word_id`` lines with dense ids from 0.

Loaders and the splitter are pure functions of (input, seed); returned
matrices are immutable after construction.
"""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import ArgumentError, ParseError, ValidationError

log = logging.getLogger(__name__)

BINARY_PRESENCE = "binary-presence"
COUNT_MAXNORM = "count-maxnorm"
RAW = "raw"  # values already in [0, 1], e.g. synthetic data

NORMALIZATION_MODES = (BINARY_PRESENCE, COUNT_MAXNORM, RAW)

_HEADER_RE = re.compile(r"#\s*users=(\d+)\s+items=(\d+)\s*$")


class RatingsMatrix:
    """Sparse binary implicit-feedback matrix.

    Stores the observed (user, item) pairs; every stored value is exactly 1
    and absence encodes 0.  Pair arrays are kept sorted and read-only so the
    matrix can be shared across threads.
    """

    def __init__(self, num_users, num_items, pairs):
        num_users = int(num_users)
        num_items = int(num_items)
        if num_users < 0 or num_items < 0:
            raise ValidationError("matrix dimensions must be non-negative")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            if pairs.min() < 0:
                raise ValidationError("negative user or item id")
            if pairs[:, 0].max() >= num_users:
                raise ValidationError(
                    f"user id {pairs[:, 0].max()} outside [0, {num_users})"
                )
            if pairs[:, 1].max() >= num_items:
                raise ValidationError(
                    f"item id {pairs[:, 1].max()} outside [0, {num_items})"
                )
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        if len(pairs) > 1:
            dup = np.all(pairs[1:] == pairs[:-1], axis=1)
            if dup.any():
                u, j = pairs[1:][dup][0]
                raise ValidationError(f"duplicate rating pair ({u}, {j})")
        self.num_users = num_users
        self.num_items = num_items
        self._pairs = pairs
        self._user_ptr = np.searchsorted(pairs[:, 0], np.arange(num_users + 1))
        by_item = pairs[np.lexsort((pairs[:, 0], pairs[:, 1]))]
        self._item_users = np.ascontiguousarray(by_item[:, 0])
        self._item_ptr = np.searchsorted(by_item[:, 1], np.arange(num_items + 1))
        for arr in (self._pairs, self._user_ptr, self._item_users, self._item_ptr):
            arr.setflags(write=False)

    def __repr__(self):
        return (
            f"RatingsMatrix(num_users={self.num_users}, "
            f"num_items={self.num_items}, nnz={self.nnz})"
        )

    @property
    def pairs(self):
        """All (user, item) pairs, sorted by user then item; shape (nnz, 2)."""
        return self._pairs

    @property
    def nnz(self):
        return len(self._pairs)

    def items_of(self, user):
        """Sorted item ids rated by ``user``."""
        lo, hi = self._user_ptr[user], self._user_ptr[user + 1]
        return self._pairs[lo:hi, 1]

    def users_of(self, item):
        """Sorted user ids that rated ``item``."""
        lo, hi = self._item_ptr[item], self._item_ptr[item + 1]
        return self._item_users[lo:hi]

    def to_dense(self):
        dense = np.zeros((self.num_users, self.num_items))
        if self.nnz:
            dense[self._pairs[:, 0], self._pairs[:, 1]] = 1.0
        return dense


class ContentMatrix:
    """Items-by-vocabulary matrix with values in [0, 1], stored sparse."""

    def __init__(self, matrix, normalization_mode=RAW):
        if normalization_mode not in NORMALIZATION_MODES:
            raise ArgumentError(f"unknown normalization mode {normalization_mode!r}")
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.nnz and (csr.data.min() < 0.0 or csr.data.max() > 1.0):
            raise ValidationError("content values must lie in [0, 1]")
        self.matrix = csr
        self.num_items, self.vocab_size = csr.shape
        self.normalization_mode = normalization_mode

    def __repr__(self):
        return (
            f"ContentMatrix(num_items={self.num_items}, "
            f"vocab_size={self.vocab_size}, nnz={self.matrix.nnz}, "
            f"mode={self.normalization_mode!r})"
        )

    @property
    def nnz(self):
        return self.matrix.nnz

    def row(self, item):
        """Dense 1-D content vector of one item."""
        return np.asarray(self.matrix[item].todense()).ravel()

    def toarray(self):
        return self.matrix.toarray()


@dataclass(frozen=True)
class SplitSpec:
    """Per-user training-set size, RNG seed, and repetition count."""

    P: int
    seed: int
    repetitions: int = 1

    def __post_init__(self):
        if self.P < 1:
            raise ArgumentError("P must be at least 1")
        if self.repetitions < 1:
            raise ArgumentError("repetitions must be at least 1")


def load_ratings(path):
    """Read a ratings file into a validated :class:`RatingsMatrix`.

    Dimensions come from a ``# users=I items=J`` header when present,
    otherwise from max id + 1.
    """
    pairs = []
    num_users = num_items = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                m = _HEADER_RE.match(line)
                if m:
                    num_users, num_items = int(m.group(1)), int(m.group(2))
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(
                    f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}"
                )
            try:
                pairs.append((int(fields[0]), int(fields[1])))
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: non-integer id in {line!r}"
                ) from None
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if num_users is None:
        num_users = int(arr[:, 0].max()) + 1 if len(arr) else 0
    if num_items is None:
        num_items = int(arr[:, 1].max()) + 1 if len(arr) else 0
    return RatingsMatrix(num_users, num_items, arr)


def save_ratings(ratings, path):
    """Write a ratings file with a shape header (round-trips via load_ratings)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# users={ratings.num_users} items={ratings.num_items}\n")
        for u, j in ratings.pairs:
            fh.write(f"{u}\t{j}\n")


def load_content(path, mode=BINARY_PRESENCE, num_items=None, vocab_size=None):
    """Read item/word/count triples and normalize them into [0, 1].

    Counts of duplicate (item, word) pairs are accumulated.  Items in
    [0, num_items) without any triple stay all-zero and are logged as a
    warning.
    """
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 'item<TAB>word<TAB>count', got {line!r}"
                )
            try:
                item, word, count = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad field in {line!r}") from None
            if count <= 0:
                raise ValidationError(
                    f"{path}:{lineno}: count must be positive, got {count}"
                )
            if vocab_size is not None and word >= vocab_size:
                raise ValidationError(
                    f"{path}:{lineno}: word id {word} outside vocabulary of size {vocab_size}"
                )
            if item < 0 or word < 0:
                raise ValidationError(f"{path}:{lineno}: negative id")
            triples.append((item, word, count))
    return content_from_triples(triples, mode, num_items=num_items, vocab_size=vocab_size)


def content_from_triples(triples, mode=BINARY_PRESENCE, num_items=None, vocab_size=None):
    """Build a normalized :class:`ContentMatrix` from (item, word, count) triples."""
    if mode not in (BINARY_PRESENCE, COUNT_MAXNORM):
        raise ArgumentError(f"unknown normalization mode {mode!r}")
    triples = list(triples)
    if num_items is None:
        num_items = max((t[0] for t in triples), default=-1) + 1
    if vocab_size is None:
        vocab_size = max((t[1] for t in triples), default=-1) + 1
    rows = np.array([t[0] for t in triples], dtype=np.int64)
    cols = np.array([t[1] for t in triples], dtype=np.int64)
    vals = np.array([t[2] for t in triples], dtype=np.float64)
    counts = sp.csr_matrix((vals, (rows, cols)), shape=(num_items, vocab_size))
    counts.sum_duplicates()
    if mode == BINARY_PRESENCE:
        counts.data = np.ones_like(counts.data)
    else:
        for i in range(num_items):
            lo, hi = counts.indptr[i], counts.indptr[i + 1]
            if hi > lo:
                counts.data[lo:hi] /= counts.data[lo:hi].max()
    empty = int(np.sum(np.diff(counts.indptr) == 0))
    if empty and num_items:
        log.warning("%d of %d items have all-zero content rows", empty, num_items)
    return ContentMatrix(counts, mode)


def corrupt(content, noise_level, seed):
    """Masking noise: zero each nonzero entry independently with probability
    ``noise_level``; zeros are never changed and unmasked entries keep their
    clean value.  Deterministic for a fixed seed."""
    if not 0.0 <= noise_level <= 1.0:
        raise ArgumentError(f"noise level must lie in [0, 1], got {noise_level}")
    rng = np.random.default_rng(seed)
    csr = content.matrix.copy()
    if csr.nnz:
        keep = rng.random(csr.nnz) >= noise_level
        csr.data = csr.data * keep
        csr.eliminate_zeros()
    return ContentMatrix(csr, content.normalization_mode)


def split(ratings, spec):
    """Per-user train/test split.

    For each user with more than ``spec.P`` rated items, exactly P uniformly
    chosen items go to train and the rest to test; that user joins the
    evaluation set.  Users with at most P items keep everything in train and
    are excluded from evaluation.
    """
    rng = np.random.default_rng(spec.seed)
    train_parts, test_parts = [], []
    eval_users = set()
    for user in range(ratings.num_users):
        items = ratings.items_of(user)
        if len(items) == 0:
            continue
        if len(items) <= spec.P:
            picked = items
            rest = items[:0]
        else:
            idx = rng.choice(len(items), size=spec.P, replace=False)
            mask = np.zeros(len(items), dtype=bool)
            mask[idx] = True
            picked, rest = items[mask], items[~mask]
            eval_users.add(user)
        train_parts.append(np.column_stack([np.full(len(picked), user), picked]))
        if len(rest):
            test_parts.append(np.column_stack([np.full(len(rest), user), rest]))
    train_pairs = np.concatenate(train_parts) if train_parts else np.empty((0, 2), np.int64)
    test_pairs = np.concatenate(test_parts) if test_parts else np.empty((0, 2), np.int64)
    train = RatingsMatrix(ratings.num_users, ratings.num_items, train_pairs)
    test = RatingsMatrix(ratings.num_users, ratings.num_items, test_pairs)
    return train, test, eval_users


def split_repetitions(ratings, spec):
    """Yield ``spec.repetitions`` independent splits with derived seeds."""
    for rep in range(spec.repetitions):
        seed = int(np.random.SeedSequence([spec.seed, rep]).generate_state(1)[0])
        yield split(ratings, SplitSpec(spec.P, seed))


def write_split_manifest(path, train, spec):
    """Record seed, P, and the train pair list so a split can be reproduced."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed={spec.seed}\n")
        fh.write(f"P={spec.P}\n")
        fh.write(f"users={train.num_users}\n")
        fh.write(f"items={train.num_items}\n")
        for u, j in train.pairs:
            fh.write(f"{u}\t{j}\n")


def read_split_manifest(path):
    """Read back (train RatingsMatrix, meta dict) written by write_split_manifest."""
    meta = {}
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "=" in line and "\t" not in line:
                key, value = line.split("=", 1)
                meta[key.strip()] = int(value)
            else:
                fields = line.split("\t")
                if len(fields) != 2:
                    raise ParseError(f"{path}:{lineno}: bad manifest line {line!r}")
                pairs.append((int(fields[0]), int(fields[1])))
    train = RatingsMatrix(meta["users"], meta["items"], pairs)
    return train, meta


class Vocabulary:
    """Top-S vocabulary selected by tf-idf.

    ``terms`` is a list of (token, document_frequency, tfidf) ordered by word
    id.  tf is the raw corpus count, idf is ln(num_docs / df), and ties are
    broken lexicographically.
    """

    def __init__(self, terms):
        self.terms = [(str(t), int(df), float(score)) for t, df, score in terms]
        self._ids = {t: i for i, (t, _, _) in enumerate(self.terms)}
        if len(self._ids) != len(self.terms):
            raise ValidationError("duplicate token in vocabulary")

    @property
    def selected_size(self):
        return len(self.terms)

    def word_id(self, token):
        return self._ids[token]

    def __contains__(self, token):
        return token in self._ids

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for word_id, (token, _, _) in enumerate(self.terms):
                fh.write(f"{token}\t{word_id}\n")

    @staticmethod
    def load(path):
        """Read a token<TAB>word_id file; df/tfidf metadata is not stored."""
        tokens = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise ParseError(f"{path}:{lineno}: bad vocabulary line {line!r}")
                tokens[int(fields[1])] = fields[0]
        if sorted(tokens) != list(range(len(tokens))):
            raise ValidationError(f"{path}: word ids are not dense from 0")
        return Vocabulary([(tokens[i], 0, 0.0) for i in range(len(tokens))])


def build_vocabulary(token_triples, size):
    """Select the top-``size`` tokens by tf-idf from (doc, token, count) triples.

    tf is the total raw count over the corpus and idf = ln(num_docs / df);
    score ties are broken by lexicographic token order.
    """
    if size < 1:
        raise ArgumentError("vocabulary size must be at least 1")
    tf = defaultdict(float)
    docs_of = defaultdict(set)
    docs = set()
    for doc, token, count in token_triples:
        if count <= 0:
            raise ValidationError(f"count must be positive, got {count}")
        token = str(token)
        tf[token] += count
        docs_of[token].add(doc)
        docs.add(doc)
    num_docs = len(docs)
    scored = [
        (token, len(docs_of[token]), tf[token] * math.log(num_docs / len(docs_of[token])))
        for token in tf
    ]
    scored.sort(key=lambda rec: (-rec[2], rec[0]))
    return Vocabulary(scored[:size])


def apply_vocabulary(token_triples, vocab):
    """Map (doc, token, count) triples to (doc, word_id, count), dropping
    tokens outside the vocabulary."""
    out = []
    for doc, token, count in token_triples:
        token = str(token)
        if token in vocab:
            out.append((doc, vocab.word_id(token), count))
    return out


def generate_synthetic(num_users, num_items, vocab_size, n_factors, hyper, seed,
                       widths=None, input_density=0.2):
    """Draw a dataset from the model's own generative story.

    Network weights and biases come from the N(0, 1/lambda_w) prior; content
    is produced by the deterministic sigmoid layer recursion from a random
    binary seed matrix, plus N(0, 1/lambda_n) output noise clipped into
    [0, 1].  Item vectors are the middle-layer codes plus N(0, 1/lambda_v)
    offsets, user vectors are N(0, 1/lambda_u), and binary ratings come from
    thresholding N(u.v, 1/conf_a) draws at 0.5.

    Returns (ratings, content, user_factors, item_factors, network).
    """
    from . import sdae  # local import: sdae does not depend on this module

    if min(num_users, num_items, vocab_size, n_factors) < 1:
        raise ArgumentError("all dimensions must be positive")
    if widths is None:
        widths = (vocab_size, n_factors, vocab_size)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    net = sdae.sample_network(widths, hyper.lambda_w, rngs[0])

    x_seed = (rngs[1].random((num_items, vocab_size)) < input_density).astype(np.float64)
    trace = sdae.forward(net, x_seed)
    codes = trace.layer_outputs[net.middle]
    clean = trace.layer_outputs[net.num_layers]
    if math.isfinite(hyper.lambda_n):
        clean = clean + rngs[2].normal(scale=hyper.lambda_n ** -0.5, size=clean.shape)
    content = ContentMatrix(np.clip(clean, 0.0, 1.0), RAW)

    if math.isfinite(hyper.lambda_v):
        offsets = rngs[3].normal(scale=hyper.lambda_v ** -0.5, size=codes.shape)
    else:
        offsets = np.zeros_like(codes)
    item_factors = codes + offsets
    user_factors = rngs[3].normal(
        scale=hyper.lambda_u ** -0.5, size=(num_users, n_factors)
    )
    scores = user_factors @ item_factors.T
    noisy = scores + rngs[4].normal(scale=hyper.conf_a ** -0.5, size=scores.shape)
    pairs = np.argwhere(noisy > 0.5)
    ratings = RatingsMatrix(num_users, num_items, pairs)
    return ratings, content, user_factors, item_factors, net
