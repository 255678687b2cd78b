"""Silver explanation masks from a dependency parse.

The main predicate (tree root) is always marked. Its children are marked
when attached as ``obj`` or ``xcomp``, or as ``nsubj``/``obl`` with a common
noun POS. Children of those nodes attached as ``compound`` are marked unless
they are proper nouns. Stopwords are then removed from the marked set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import AnnotatedUtterance, ParsedUtterance, is_stopword

ALWAYS_RELS = frozenset({"obj", "xcomp"})
NOUN_ONLY_RELS = frozenset({"nsubj", "obl"})


@dataclass
class TraversalTrace:
    root_index: int
    level1: dict[int, str] = field(default_factory=dict)
    compounds: set[int] = field(default_factory=set)
    removed_stopwords: set[int] = field(default_factory=set)
    # children of the root dropped only for their POS (nsubj/obl that are not NOUN)
    pos_rejected: dict[int, str] = field(default_factory=dict)
    degenerate: bool = False

    def marked(self) -> set[int]:
        return {self.root_index} | set(self.level1) | self.compounds

    def to_json(self, record_id: str) -> dict:
        return {
            "id": record_id,
            "root": self.root_index,
            "level1": [{"index": i, "deprel": r} for i, r in sorted(self.level1.items())],
            "compounds": sorted(self.compounds),
            "removed_stopwords": sorted(self.removed_stopwords),
            "pos_rejected": [{"index": i, "deprel": r} for i, r in sorted(self.pos_rejected.items())],
            "degenerate": self.degenerate,
        }


def _children(utt: ParsedUtterance, head: int):
    return [t for t in utt.tokens if t.head == head]


def main_predicate(utt: ParsedUtterance) -> int:
    """Index of the token attached to the artificial root, whatever its POS."""
    for tok in utt.tokens:
        if tok.head == 0:
            return tok.index
    raise ValueError(f"{utt.id}: no root token")


def level1_arguments(utt: ParsedUtterance, root: int, trace: TraversalTrace | None = None) -> dict[int, str]:
    selected = {}
    for tok in _children(utt, root):
        if tok.deprel in ALWAYS_RELS:
            selected[tok.index] = tok.deprel
        elif tok.deprel in NOUN_ONLY_RELS:
            if tok.upos == "NOUN":
                selected[tok.index] = tok.deprel
            elif trace is not None:
                trace.pos_rejected[tok.index] = tok.deprel
    return selected


def compound_expansion(utt: ParsedUtterance, level1) -> set[int]:
    level1 = set(level1)
    return {
        tok.index
        for tok in utt.tokens
        if tok.head in level1 and tok.deprel == "compound" and tok.upos != "PROPN"
    }


def annotate_with_trace(utt: ParsedUtterance) -> tuple[AnnotatedUtterance, TraversalTrace]:
    root = main_predicate(utt)
    trace = TraversalTrace(root)
    trace.level1 = level1_arguments(utt, root, trace)
    trace.compounds = compound_expansion(utt, trace.level1)

    marked = trace.marked()
    forms = {t.index: t.form for t in utt.tokens}
    trace.removed_stopwords = {i for i in marked if is_stopword(forms[i])}
    keep = marked - trace.removed_stopwords
    trace.degenerate = not keep
    mask = tuple(int(t.index in keep) for t in utt.tokens)
    return AnnotatedUtterance(utt, mask), trace


def annotate(utt: ParsedUtterance) -> AnnotatedUtterance:
    return annotate_with_trace(utt)[0]
