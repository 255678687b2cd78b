"""Reading dependency-parsed intent corpora and persisting annotated records.

Input is CoNLL-U with per-sentence metadata comments::

    # sent_id = snips-0001
    # text = Book a table at the top-rated pub in Garner
    # intent = BookRestaurant
    # slots = O O O O O B-sort O O B-city
    1	Book	book	VERB	_	_	0	root	_	_
    ...

Output is one JSON object per line (see ``record_to_json``).
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import IO, Iterable, Iterator, Optional, Sequence

logger = logging.getLogger(__name__)

MAX_LEN = 80
MULTI_INTENT_SEP = "#"

UPOS_TAGS = frozenset(
    "ADJ ADP ADV AUX CCONJ DET INTJ NOUN NUM PART PRON PROPN PUNCT SCONJ SYM VERB X".split()
)

DEPRELS = frozenset(
    """acl advcl advmod amod appos aux case cc ccomp clf compound conj cop csubj
    dep det discourse dislocated expl fixed flat goeswith iobj list mark nmod
    nsubj nummod obj obl orphan parataxis punct reparandum root vocative xcomp""".split()
)

# Stanford basic-dependency names that have a direct universal counterpart.
_STANFORD_TO_UD = {
    "dobj": "obj",
    "nsubjpass": "nsubj",
    "csubjpass": "csubj",
    "auxpass": "aux",
    "nn": "compound",
    "prt": "compound",
    "neg": "advmod",
    "poss": "nmod",
    "possessive": "case",
    "num": "nummod",
    "pobj": "obl",
    "prep": "case",
}


class FormatError(ValueError):
    """Malformed input line (CoNLL-U or JSONL) that aborts the whole read."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class RecordError(ValueError):
    """A single record violates an invariant; carries the record id."""

    def __init__(self, record_id: str, message: str):
        super().__init__(f"{record_id}: {message}")
        self.record_id = record_id
        self.reason = message


@dataclass(frozen=True)
class Token:
    index: int
    form: str
    upos: str
    head: int
    deprel: str


@dataclass(frozen=True)
class ParsedUtterance:
    id: str
    text: str
    tokens: tuple[Token, ...]
    intent: str
    slots: Optional[tuple[str, ...]] = None

    @property
    def forms(self) -> list[str]:
        return [t.form for t in self.tokens]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class AnnotatedUtterance:
    utterance: ParsedUtterance
    mask: tuple[int, ...]

    @property
    def id(self) -> str:
        return self.utterance.id

    @property
    def intent(self) -> str:
        return self.utterance.intent

    @property
    def tokens(self) -> tuple[Token, ...]:
        return self.utterance.tokens

    @property
    def forms(self) -> list[str]:
        return self.utterance.forms


@dataclass
class IngestStats:
    """Counts of lossy or rejected input, for the annotate summary."""

    sentences: int = 0
    multi_intent: int = 0
    truncated: int = 0
    rejected: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class Dataset:
    records: list
    labels: list[str]
    stats: Optional[IngestStats] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _utterance(record) -> ParsedUtterance:
    return record.utterance if isinstance(record, AnnotatedUtterance) else record


def make_dataset(records: Sequence, stats: Optional[IngestStats] = None) -> Dataset:
    """Wrap records, deriving the sorted label inventory and checking id uniqueness."""
    seen = set()
    for r in records:
        rid = _utterance(r).id
        if rid in seen:
            raise RecordError(rid, "duplicate record id")
        seen.add(rid)
    labels = sorted({_utterance(r).intent for r in records})
    return Dataset(list(records), labels, stats)


def normalize_deprel(label: str) -> str:
    """Map a dependency relation onto the universal inventory.

    Stanford-style names with a universal counterpart are renamed
    (``dobj`` -> ``obj``) and subtypes collapse to their base
    (``obl:tmod`` -> ``obl``). Anything else is lowercased and returned.
    """
    label = label.strip().lower()
    base = label.split(":", 1)[0]
    return _STANFORD_TO_UD.get(base, base)


@lru_cache(maxsize=None)
def stopword_set() -> frozenset[str]:
    text = resources.files("intent_rationale").joinpath("data/stopwords_en.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def is_stopword(form: str) -> bool:
    return form.lower() in stopword_set()


def validate_utterance(utt: ParsedUtterance, max_len: int = MAX_LEN) -> None:
    """Raise RecordError unless ``utt`` satisfies the ParsedUtterance invariants."""
    m = len(utt.tokens)
    if not 1 <= m <= max_len:
        raise RecordError(utt.id, f"token count {m} outside [1, {max_len}]")
    if not utt.intent:
        raise RecordError(utt.id, "empty intent")
    for pos, tok in enumerate(utt.tokens, start=1):
        if tok.index != pos:
            raise RecordError(utt.id, f"token index {tok.index} at position {pos}")
        if tok.upos not in UPOS_TAGS:
            raise RecordError(utt.id, f"unknown upos {tok.upos!r} on token {pos}")
        if tok.deprel not in DEPRELS:
            raise RecordError(utt.id, f"unknown deprel {tok.deprel!r} on token {pos}")
        if not 0 <= tok.head <= m or tok.head == pos:
            raise RecordError(utt.id, f"bad head {tok.head} on token {pos}")
    roots = [t.index for t in utt.tokens if t.head == 0]
    if len(roots) != 1:
        raise RecordError(utt.id, f"expected exactly one root, found {len(roots)}")
    heads = {t.index: t.head for t in utt.tokens}
    for start in heads:
        node, steps = start, 0
        while node != 0:
            node = heads[node]
            steps += 1
            if steps > m:
                raise RecordError(utt.id, f"cycle through token {start}")
    if utt.slots is not None and len(utt.slots) != m:
        raise RecordError(utt.id, f"{len(utt.slots)} slots for {m} tokens")


def truncate(utt: ParsedUtterance, max_len: int) -> ParsedUtterance:
    """Keep the first ``max_len`` tokens, reattaching subtrees cut from their heads.

    Orphans attach to the root if it survived, otherwise the first orphan
    becomes the root and the remaining orphans attach to it.
    """
    if len(utt.tokens) <= max_len:
        return utt
    kept = list(utt.tokens[:max_len])
    root = next((t.index for t in kept if t.head == 0), None)
    fixed = []
    for tok in kept:
        if tok.head > max_len:
            if root is None:
                root = tok.index
                tok = Token(tok.index, tok.form, tok.upos, 0, "root")
            else:
                tok = Token(tok.index, tok.form, tok.upos, root, "dep")
        fixed.append(tok)
    slots = utt.slots[:max_len] if utt.slots is not None else None
    return ParsedUtterance(utt.id, utt.text, tuple(fixed), utt.intent, slots)


def _blocks(stream: Iterable[str]) -> Iterator[list[tuple[int, str]]]:
    block: list[tuple[int, str]] = []
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            if block:
                yield block
            block = []
        else:
            block.append((line_no, line))
    if block:
        yield block


def _block_to_utterance(block: list[tuple[int, str]], default_id: str) -> ParsedUtterance:
    meta: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    for line_no, line in block:
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise FormatError(f"expected 10 tab-separated columns, got {len(cols)}", line_no)
        rows.append((line_no, cols))

    rid = meta.get("sent_id", default_id)
    if not rows:
        raise RecordError(rid, "no token lines")
    if "intent" not in meta or not meta["intent"]:
        raise RecordError(rid, "missing '# intent' metadata")

    tokens = []
    for line_no, cols in rows:
        idx = cols[0]
        if "-" in idx or "." in idx:
            raise RecordError(rid, f"multiword or empty node {idx!r} (line {line_no})")
        try:
            index, head = int(idx), int(cols[6])
        except ValueError:
            raise FormatError(f"non-integer id or head {idx!r}/{cols[6]!r}", line_no) from None
        tokens.append(Token(index, cols[1], cols[3], head, normalize_deprel(cols[7])))

    text = meta.get("text") or " ".join(t.form for t in tokens)
    slots = tuple(meta["slots"].split()) if meta.get("slots") else None
    return ParsedUtterance(rid, text, tuple(tokens), meta["intent"], slots)


def parse_conllu(stream: Iterable[str], max_len: int = MAX_LEN) -> Dataset:
    """Read CoNLL-U sentence blocks into a Dataset of ParsedUtterance.

    Multi-intent sentences are dropped, overlong ones truncated, and
    structurally invalid ones rejected; all three are counted in
    ``dataset.stats``. A line with the wrong column count raises
    FormatError.
    """
    stats = IngestStats()
    records: list[ParsedUtterance] = []
    seen: set[str] = set()
    for n, block in enumerate(_blocks(stream), start=1):
        if all(line.startswith("#") for _, line in block):
            continue
        stats.sentences += 1
        try:
            utt = _block_to_utterance(block, default_id=f"s{n}")
            if MULTI_INTENT_SEP in utt.intent:
                stats.multi_intent += 1
                logger.warning("%s: dropped multi-intent label %s", utt.id, utt.intent)
                continue
            # validate before truncating so cut subtrees are real trees
            validate_utterance(utt, max_len=max(max_len, len(utt.tokens)))
            if len(utt.tokens) > max_len:
                stats.truncated += 1
                logger.warning("%s: truncated %d tokens to %d", utt.id, len(utt.tokens), max_len)
                utt = truncate(utt, max_len)
                validate_utterance(utt, max_len)
            if utt.id in seen:
                raise RecordError(utt.id, "duplicate record id")
        except RecordError as err:
            stats.rejected.append((err.record_id, err.reason))
            logger.warning("rejected %s", err)
            continue
        seen.add(utt.id)
        records.append(utt)
    return make_dataset(records, stats)


def record_to_json(record) -> dict:
    utt = _utterance(record)
    obj = {
        "id": utt.id,
        "text": utt.text,
        "tokens": [t.form for t in utt.tokens],
        "upos": [t.upos for t in utt.tokens],
        "head": [t.head for t in utt.tokens],
        "deprel": [t.deprel for t in utt.tokens],
        "intent": utt.intent,
    }
    if isinstance(record, AnnotatedUtterance):
        obj["explanation_mask"] = list(record.mask)
    if utt.slots is not None:
        obj["slots"] = list(utt.slots)
    return obj


def record_from_json(obj: dict):
    rid = str(obj.get("id", "?"))
    try:
        forms, upos, heads, rels = obj["tokens"], obj["upos"], obj["head"], obj["deprel"]
        intent = obj["intent"]
    except KeyError as err:
        raise RecordError(rid, f"missing field {err.args[0]!r}") from None
    if not len(forms) == len(upos) == len(heads) == len(rels):
        raise RecordError(rid, "parallel token arrays differ in length")
    tokens = tuple(
        Token(i, f, u, int(h), r) for i, (f, u, h, r) in enumerate(zip(forms, upos, heads, rels), start=1)
    )
    slots = tuple(obj["slots"]) if obj.get("slots") is not None else None
    utt = ParsedUtterance(rid, obj.get("text") or " ".join(forms), tokens, intent, slots)
    validate_utterance(utt, max_len=max(MAX_LEN, len(tokens)))
    if obj.get("explanation_mask") is None:
        return utt
    mask = tuple(obj["explanation_mask"])
    if len(mask) != len(tokens):
        raise RecordError(rid, f"mask length {len(mask)} != token count {len(tokens)}")
    if any(v not in (0, 1) or isinstance(v, bool) for v in mask):
        raise RecordError(rid, "mask values must be 0 or 1")
    return AnnotatedUtterance(utt, mask)


def write_jsonl(dataset: Dataset | Iterable, sink: IO[str]) -> int:
    n = 0
    for record in dataset:
        sink.write(json.dumps(record_to_json(record), ensure_ascii=False, separators=(",", ":")))
        sink.write("\n")
        n += 1
    return n


def read_jsonl(stream: Iterable[str]) -> Dataset:
    """Read records written by ``write_jsonl``.

    Malformed JSON raises FormatError carrying the line number; records
    violating invariants (e.g. mask length) raise RecordError with the id.
    """
    records = []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise FormatError(f"malformed JSON record: {err.msg}", line_no) from None
        if not isinstance(obj, dict):
            raise FormatError("record is not an object", line_no)
        records.append(record_from_json(obj))
    return make_dataset(records)


def label_counts(dataset: Dataset) -> Counter:
    return Counter(_utterance(r).intent for r in dataset)
