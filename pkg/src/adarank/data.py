"""Hash tokenizer, CSV datasets, bundled scoring corpus, synthetic tasks.

The tokenizer hashes lowercased alphanumeric runs straight into id
space, so there is no vocabulary to train or ship and every platform
produces identical ids.  Ids 0 and 1 are reserved for padding and for
the empty/unknown token.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources as importlib_resources

import numpy as np

from .model import InputBatch
from .rng import RngStream, StreamTag, fnv1a64

PAD_ID = 0
UNKNOWN_ID = 1


@dataclass(frozen=True)
class Tokenizer:
    vocab_size: int

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave room for pad and unknown ids")

    @staticmethod
    def words(text: str) -> list:
        """Lowercased maximal alphanumeric runs; everything else separates."""
        out = []
        current = []
        for ch in text.lower():
            if ch.isalnum():
                current.append(ch)
            elif current:
                out.append("".join(current))
                current = []
        if current:
            out.append("".join(current))
        return out

    def token_id(self, word: str) -> int:
        return 2 + fnv1a64(word) % (self.vocab_size - 2)

    def tokenize(self, text: str, max_len: int) -> list:
        """Ids truncated/padded to max_len; empty text maps to the unknown id."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        ids = [self.token_id(w) for w in self.words(text)]
        if not ids:
            ids = [UNKNOWN_ID]
        ids = ids[:max_len]
        return ids + [PAD_ID] * (max_len - len(ids))

    def encode_batch(self, texts, max_len: int, labels=None) -> InputBatch:
        """Pad to the longest tokenized text, capped at max_len.

        Tight padding keeps desk-scale attention cheap; the cap keeps the
        positional table in range.
        """
        tokenized = [[self.token_id(w) for w in self.words(t)] or [UNKNOWN_ID]
                     for t in texts]
        width = min(max(len(ids) for ids in tokenized), max_len)
        ids = np.full((len(tokenized), width), PAD_ID, dtype=np.int64)
        for row, toks in enumerate(tokenized):
            toks = toks[:width]
            ids[row, :len(toks)] = toks
        return InputBatch(ids, labels=None if labels is None else np.asarray(labels))


@dataclass
class Dataset:
    records: list  # (text, label) pairs
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        if not self.records:
            raise ValueError(f"dataset {self.name!r} is empty")
        for text, label in self.records:
            if int(label) < 0:
                raise ValueError(f"dataset {self.name!r} has negative label {label}")

    def __len__(self):
        return len(self.records)

    @property
    def texts(self) -> list:
        return [t for t, _ in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([l for _, l in self.records], dtype=np.int64)

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def load_csv(path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read `label,text` CSV (RFC-4180, UTF-8); errors carry the line number."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if [h.strip().lower() for h in header] != ["label", "text"]:
            raise ValueError(f"{path}: line 1: expected header 'label,text', got {header}")
        for row in reader:
            line = reader.line_num
            if len(row) != 2:
                raise ValueError(f"{path}: line {line}: expected 2 columns, got {len(row)}")
            raw_label, text = row
            try:
                label = int(raw_label)
            except ValueError:
                raise ValueError(
                    f"{path}: line {line}: label {raw_label!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                bound = num_classes if num_classes is not None else "0"
                raise ValueError(
                    f"{path}: line {line}: label {label} out of range (num_classes={bound})")
            records.append((text, label))
    if not records:
        raise ValueError(f"{path}: no data rows")
    return Dataset(records, name=str(path), split=split)


def save_csv(dataset: Dataset, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "text"])
        for text, label in dataset.records:
            writer.writerow([label, text])


@dataclass
class Corpus:
    sentences: list

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("corpus is empty")

    def __len__(self):
        return len(self.sentences)


def generic_corpus() -> Corpus:
    """The bundled generic sentences used for scoring when no dataset is given."""
    text = (importlib_resources.files("adarank.resources")
            .joinpath("corpus.txt").read_text(encoding="utf-8"))
    return Corpus([line for line in text.splitlines() if line.strip()])


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        return Corpus([line.rstrip("\n") for line in fh if line.strip()])


def in_domain_sentences(dataset: Dataset, seed: int, count: int = 10) -> Corpus:
    """Scoring text drawn from the task itself: seeded shuffle, first `count`."""
    order = RngStream(seed, StreamTag.SPLIT).permutation(len(dataset))
    picked = [dataset.records[i][0] for i in order[:count]]
    return Corpus(picked)


DEFAULT_FILLERS = ("the", "a", "of", "and", "to", "in", "on", "with",
                   "report", "note", "item", "update")


def default_vocab_subsets(num_classes: int, words_per_class: int = 6) -> list:
    """Disjoint per-class keyword lists; plain ascii so any tokenizer splits them."""
    return [[f"kw{c}x{j}" for j in range(words_per_class)]
            for c in range(num_classes)]


def synthetic_dataset(num_classes: int, n: int, vocab_subsets=None,
                      noise_rate: float = 0.0, seed: int = 0,
                      name: str = "synthetic", split: str = "train") -> Dataset:
    """Keyword-signal classification task with controllable label noise.

    Record i belongs to class i mod num_classes (exact balance).  Its text
    mixes 3..5 draws from the class keyword list with filler words.  With
    probability noise_rate the stored label is redrawn uniformly over all
    classes, so the flip probability is noise_rate * (C-1)/C.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n < num_classes:
        raise ValueError("n must be >= num_classes")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    if vocab_subsets is None:
        vocab_subsets = default_vocab_subsets(num_classes)
    if len(vocab_subsets) != num_classes:
        raise ValueError("need one keyword subset per class")
    flat = [w for subset in vocab_subsets for w in subset]
    if len(set(flat)) != len(flat):
        raise ValueError("class keyword subsets must be disjoint")

    stream = RngStream(seed, StreamTag.DATA)
    records = []
    for i in range(n):
        true_label = i % num_classes
        # one private generator per record; draws below are sequential on it
        gen = stream.substream(i).generator()
        keywords = vocab_subsets[true_label]
        n_kw = 3 + int(gen.integers(0, 3))  # 3..5 keyword draws
        n_fill = 4 + int(gen.integers(0, 4))  # 4..7 fillers
        kw_picks = [keywords[int(j)] for j in gen.integers(0, len(keywords), size=n_kw)]
        fill_picks = [DEFAULT_FILLERS[int(j)]
                      for j in gen.integers(0, len(DEFAULT_FILLERS), size=n_fill)]
        order = gen.permutation(n_kw + n_fill)
        words = kw_picks + fill_picks
        text = " ".join(words[int(k)] for k in order)
        label = true_label
        if noise_rate > 0 and float(gen.random()) < noise_rate:
            label = int(gen.integers(0, num_classes))
        records.append((text, label))
    return Dataset(records, name=name, split=split)
