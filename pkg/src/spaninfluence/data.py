"""Datasets: JSONL ingestion, heuristic span annotation, synthetic planted data.

Record format (one JSON object per line, UTF-8)::

    {"id": "m-001", "text": "the service was impeccable .", "aspect": "service",
     "label": 2, "span": [12, 26], "split": "train", "meta": {...}}

``span`` is an optional half-open character interval; it is mapped to the
minimal covering token interval.  ``split`` and ``meta`` are optional.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model import Instance, Span, Vocab, check_span, tokenize
from .seeding import substream

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
BOUNDARIES = (".", "!", "?", ";")
META_FILE = "meta.json"


class DataError(ValueError):
    pass


class AnnotationError(DataError):
    pass


@dataclass
class Dataset:
    train: list[Instance]
    dev: list[Instance]
    test: list[Instance]
    num_classes: int
    vocab: Vocab
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for z in self.all():
            if z.id in seen:
                raise DataError(f"duplicate instance id {z.id!r}")
            seen.add(z.id)
            if z.label >= self.num_classes:
                raise DataError(f"instance {z.id!r} label {z.label} >= num_classes {self.num_classes}")
        self._index = {z.id: z for z in self.all()}

    def split(self, name: str) -> list[Instance]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all(self) -> list[Instance]:
        return [*self.train, *self.dev, *self.test]

    def get(self, instance_id: str) -> Instance:
        try:
            return self._index[instance_id]
        except KeyError:
            raise KeyError(f"no instance with id {instance_id!r}") from None

    def with_splits(self, **splits: list[Instance]) -> "Dataset":
        parts = {name: splits.get(name, getattr(self, name)) for name in SPLITS}
        return Dataset(**parts, num_classes=self.num_classes, vocab=self.vocab, provenance=dict(self.provenance))


# ---------------------------------------------------------------------------------
# JSONL ingestion


def read_records(path) -> list[dict]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            missing = [k for k in ("id", "text", "aspect", "label") if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if not isinstance(rec["label"], int) or isinstance(rec["label"], bool) or rec["label"] < 0:
                raise DataError(f"{path}:{lineno}: label must be a non-negative integer")
            rec["_line"] = lineno
            rec["_path"] = str(path)
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no instances")
    return records


def char_span_to_tokens(offsets: Sequence[tuple[int, int]], char_start: int, char_end: int) -> Span:
    """Minimal token interval covering ``[char_start, char_end)``; partial tokens round outward."""
    covered = [k for k, (a, b) in enumerate(offsets) if a < char_end and b > char_start]
    if covered:
        return Span(covered[0], covered[-1] + 1)
    k = next((k for k, (a, _) in enumerate(offsets) if a >= char_start), len(offsets))
    return Span(k, k)


def token_span_to_chars(offsets: Sequence[tuple[int, int]], span: Span, text_len: int) -> tuple[int, int]:
    if span.empty:
        c = offsets[span.start][0] if span.start < len(offsets) else text_len
        return c, c
    return offsets[span.start][0], offsets[span.end - 1][1]


def record_to_instance(rec: Mapping, vocab: Vocab) -> Instance:
    where = f"{rec.get('_path', '<record>')}:{rec.get('_line', '?')}"
    text = rec["text"]
    toks = tokenize(text)
    if not toks:
        raise DataError(f"{where}: text has no tokens")
    words = [t for t, _, _ in toks]
    offsets = tuple((a, b) for _, a, b in toks)
    aspect = [t for t, _, _ in tokenize(rec["aspect"])]
    span = None
    if rec.get("span") is not None:
        cs, ce = rec["span"]
        if not (0 <= cs <= ce <= len(text)):
            raise DataError(f"{where}: span {rec['span']} outside text of length {len(text)}")
        span = char_span_to_tokens(offsets, cs, ce)
    return Instance(
        id=str(rec["id"]),
        tokens=vocab.encode(words),
        aspect=vocab.encode(aspect),
        label=int(rec["label"]),
        gold_span=span,
        text=text,
        offsets=offsets,
        meta=dict(rec.get("meta") or {}),
    )


def build_vocab(records: Iterable[Mapping]) -> Vocab:
    vocab = Vocab()
    for rec in records:
        for tok, _, _ in tokenize(rec["aspect"]):
            vocab.add(tok)
        for tok, _, _ in tokenize(rec["text"]):
            vocab.add(tok)
    for b in BOUNDARIES:
        vocab.add(b)
    return vocab


def _file_hash(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _assemble(by_split: dict[str, list[dict]], vocab: Vocab | None, num_classes: int | None, provenance: dict) -> Dataset:
    records = [r for split in SPLITS for r in by_split.get(split, [])]
    if vocab is None:
        vocab = build_vocab(records)
    if num_classes is None:
        num_classes = max(r["label"] for r in records) + 1
    parts = {s: [record_to_instance(r, vocab) for r in by_split.get(s, [])] for s in SPLITS}
    return Dataset(**parts, num_classes=num_classes, vocab=vocab, provenance=provenance)


def load_jsonl(path, *, split: str = "train", vocab: Vocab | None = None, num_classes: int | None = None) -> Dataset:
    """Load one JSONL file.  Records carrying a ``split`` field go to that split,
    the rest to ``split``."""
    records = read_records(path)
    by_split: dict[str, list[dict]] = {s: [] for s in SPLITS}
    for rec in records:
        target = rec.get("split", split)
        if target not in SPLITS:
            raise DataError(f"{path}:{rec['_line']}: unknown split {target!r}")
        by_split[target].append(rec)
    return _assemble(by_split, vocab, num_classes, {"source": str(path), "file_hash": _file_hash([path])})


def load_dataset(directory, *, vocab: Vocab | None = None) -> Dataset:
    """Load ``train.jsonl``, ``dev.jsonl`` and ``test.jsonl`` (plus ``meta.json`` if present)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    files = [directory / f"{s}.jsonl" for s in SPLITS]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing split file(s): {', '.join(missing)}")
    meta = {}
    if (directory / META_FILE).exists():
        meta = json.loads((directory / META_FILE).read_text(encoding="utf-8"))
    by_split = {s: read_records(f) for s, f in zip(SPLITS, files)}
    provenance = {"source": str(directory), "file_hash": _file_hash(files)}
    if "seed" in meta:
        provenance["generator_seed"] = meta["seed"]
    return _assemble(by_split, vocab, meta.get("num_classes"), provenance)


def instance_to_record(z: Instance, vocab: Vocab, split: str | None = None) -> dict:
    text = z.text or " ".join(vocab.decode(z.tokens))
    offsets = z.offsets or tuple((a, b) for _, a, b in tokenize(text))
    rec = {"id": z.id, "text": text, "aspect": " ".join(vocab.decode(z.aspect)), "label": z.label}
    if z.gold_span is not None:
        rec["span"] = list(token_span_to_chars(offsets, z.gold_span, len(text)))
    if split is not None:
        rec["split"] = split
    if z.meta:
        rec["meta"] = dict(z.meta)
    return rec


def save_jsonl(path, instances: Sequence[Instance], vocab: Vocab, split: str | None = None) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for z in instances:
            fh.write(json.dumps(instance_to_record(z, vocab, split), ensure_ascii=False) + "\n")


def save_dataset(dataset: Dataset, directory, meta: Mapping | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in SPLITS:
        save_jsonl(directory / f"{s}.jsonl", dataset.split(s), dataset.vocab)
    sidecar = {"num_classes": dataset.num_classes, **(meta or {})}
    (directory / META_FILE).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------------
# Heuristic span annotation


def _find(seq: Sequence[int], sub: Sequence[int]) -> int:
    n = len(sub)
    for i in range(len(seq) - n + 1):
        if tuple(seq[i:i + n]) == tuple(sub):
            return i
    return -1


def annotate_span_heuristic(z: Instance, vocab: Vocab) -> Span:
    """Grow a span around the aspect's first occurrence up to the nearest
    sentence boundaries on each side (boundary tokens excluded)."""
    if not z.aspect:
        raise AnnotationError(f"instance {z.id!r} has an empty aspect")
    pos = _find(z.tokens, z.aspect)
    if pos < 0:
        raise AnnotationError(f"aspect of instance {z.id!r} does not occur in its text")
    stops = {vocab.id(b) for b in BOUNDARIES if b in vocab}
    left = pos
    while left > 0 and z.tokens[left - 1] not in stops:
        left -= 1
    right = pos + len(z.aspect)
    while right < len(z.tokens) and z.tokens[right] not in stops:
        right += 1
    return Span(left, right)


def annotate_missing(dataset: Dataset) -> Dataset:
    """Fill missing spans heuristically.

    Test instances whose annotation fails are dropped; train/dev instances are
    kept with a whole-sequence span and their errors are left uncorrected.
    """
    dropped, fallback = [], []
    parts = {}
    for s in SPLITS:
        out = []
        for z in dataset.split(s):
            if z.gold_span is not None:
                out.append(z)
                continue
            try:
                out.append(z.replace(gold_span=annotate_span_heuristic(z, dataset.vocab)))
            except AnnotationError:
                if s == "test":
                    dropped.append(z.id)
                    continue
                fallback.append(z.id)
                out.append(z.replace(gold_span=Span(0, len(z.tokens))))
        parts[s] = out
    if dropped:
        log.info("dropped %d test instance(s) without a usable span: %s", len(dropped), ", ".join(dropped))
    ds = dataset.with_splits(**parts)
    ds.provenance.update(annotation_dropped=dropped, annotation_fallback=fallback)
    return ds


def token_jaccard(a: Span, b: Span) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = len(a) + len(b) - inter
    return inter / union if union else 1.0


# ---------------------------------------------------------------------------------
# Synthetic planted-pattern data


@dataclass(frozen=True)
class GeneratorSpec:
    """Planted-pattern dataset recipe.

    Every instance is noise words plus one planted pattern (a short run of
    dedicated tokens); the pattern's class is the label and its position is
    the gold span.  ``noise_rate`` is the expected fraction of text tokens
    that are noise.
    """

    num_patterns: int = 4
    pattern_length: tuple[int, int] = (2, 3)
    num_classes: int = 2
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    noise_rate: float = 0.8
    noise_vocab: int = 60
    pattern_vocab: int = 24
    num_aspects: int = 4
    boundary_rate: float = 0.15
    span_labels: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.pattern_length
        if not (1 <= lo <= hi):
            raise ValueError(f"pattern_length must satisfy 1 <= min <= max, got {self.pattern_length}")
        if self.num_patterns < 1 or self.num_classes < 1:
            raise ValueError("num_patterns and num_classes must be positive")
        if not (0.0 <= self.noise_rate < 1.0):
            raise ValueError("noise_rate must lie in [0, 1)")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise TypeError(f"seed must be an integer, got {type(self.seed).__name__}")
        labels = self.labels()
        if len(labels) != self.num_patterns:
            raise ValueError("span_labels must have one entry per pattern")
        if any(not (0 <= c < self.num_classes) for c in labels):
            raise ValueError("span_labels entries must be valid class indices")
        if set(labels) != set(range(self.num_classes)):
            raise ValueError("every class needs at least one pattern")

    def labels(self) -> tuple[int, ...]:
        if self.span_labels is not None:
            return tuple(self.span_labels)
        return tuple(k % self.num_classes for k in range(self.num_patterns))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pattern_length"] = list(self.pattern_length)
        d["span_labels"] = list(self.labels())
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorSpec":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generator field(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        for name in ("num_patterns", "num_classes", "n_train", "n_dev", "n_test", "noise_vocab", "pattern_vocab", "num_aspects", "seed"):
            if name in kw and (not isinstance(kw[name], int) or isinstance(kw[name], bool)):
                raise TypeError(f"field {name!r} must be an integer, got {type(kw[name]).__name__}")
        if "pattern_length" in kw:
            kw["pattern_length"] = tuple(kw["pattern_length"])
        if kw.get("span_labels") is not None:
            kw["span_labels"] = tuple(kw["span_labels"])
        return cls(**kw)


def _pattern_table(spec: GeneratorSpec, rng) -> list[list[str]]:
    lengths = [int(rng.integers(spec.pattern_length[0], spec.pattern_length[1] + 1)) for _ in range(spec.num_patterns)]
    if sum(lengths) > spec.pattern_vocab:
        raise DataError(
            f"pattern vocabulary of {spec.pattern_vocab} tokens is too small for "
            f"{spec.num_patterns} non-overlapping patterns needing {sum(lengths)} tokens"
        )
    pool = [f"p{k}" for k in rng.permutation(spec.pattern_vocab)]
    table, pos = [], 0
    for n in lengths:
        table.append(pool[pos:pos + n])
        pos += n
    return table


def generate_synthetic(spec: GeneratorSpec) -> tuple[Dataset, dict]:
    """Deterministic planted-pattern dataset plus its metadata sidecar."""
    if spec.noise_rate > 0 and spec.noise_vocab < 1:
        raise DataError("noise_rate > 0 needs a non-empty noise vocabulary")
    rng = substream(spec.seed, "generator")
    patterns = _pattern_table(spec, rng)
    labels = spec.labels()
    noise_words = [f"w{k}" for k in range(spec.noise_vocab)]
    aspects = [f"a{k}" for k in range(max(1, spec.num_aspects))]

    records: dict[str, list[dict]] = {s: [] for s in SPLITS}
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    for split in SPLITS:
        for i in range(sizes[split]):
            k = int(rng.integers(spec.num_patterns))
            pat = patterns[k]
            aspect = aspects[int(rng.integers(len(aspects)))]
            if spec.noise_rate > 0:
                target = len(pat) * spec.noise_rate / (1.0 - spec.noise_rate)
                n_noise = int(rng.integers(max(1, int(0.5 * target)), int(1.5 * target) + 2))
            else:
                n_noise = 0
            noise = [noise_words[j] for j in rng.integers(len(noise_words), size=n_noise)] if n_noise else []
            cut = int(rng.integers(0, n_noise + 1))
            left, right = noise[:cut], noise[cut:]
            # sentence boundaries inside the noise, never inside the aspect+pattern clause
            left = [w if rng.random() > spec.boundary_rate or j == len(left) - 1 else "." for j, w in enumerate(left)]
            right = [w if rng.random() > spec.boundary_rate or j == 0 else "." for j, w in enumerate(right)]
            words = left + ([aspect] if spec.num_aspects > 0 else []) + pat + right
            text = " ".join(words)
            start_tok = len(left) + (1 if spec.num_aspects > 0 else 0)
            cs = sum(len(w) + 1 for w in words[:start_tok])
            ce = cs + len(" ".join(pat))
            records[split].append({
                "id": f"{split[:2]}-{i:04d}",
                "text": text,
                "aspect": aspect,
                "label": labels[k],
                "span": [cs, ce],
                "meta": {"pattern": k},
            })
    meta = {
        "generator": "planted-pattern/1",
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "num_classes": spec.num_classes,
        "patterns": [{"id": k, "tokens": p, "label": labels[k]} for k, p in enumerate(patterns)],
    }
    ds = _assemble(records, None, spec.num_classes, {"source": "synthetic", "generator_seed": spec.seed})
    return ds, meta


def pattern_of(z: Instance) -> int | None:
    p = z.meta.get("pattern") if z.meta else None
    return None if p is None else int(p)


def check_spans(instances: Iterable[Instance]) -> list[str]:
    """Ids of instances lacking a usable span."""
    bad = []
    for z in instances:
        if z.gold_span is None:
            bad.append(z.id)
        else:
            check_span(z, z.gold_span)
    return bad
