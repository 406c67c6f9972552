"""Search spaces: vocabularies, genomes, and their text format.

A :class:`PatternGenome` holds the categorical *values* the controller chose,
one tuple per layer group (ConvNet) or application site (Transformer). A
:class:`SearchSpace` fixes the vocabulary per slot and converts genomes to and
from the flat index tuples the controller emits.

Text format (used in logs and on the command line)::

    transformer;query:size=70,stride=0,share_t=true,share_c=false;key:...
    conv;group_1:size=2,stride=4,repeat=3,share_c=true,residual=false,rotate=30,shear_x=0.1,shear_y=0

Whitespace around separators is ignored.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .masks import ConvPatternSpec, TransformerPatternSpec
from .vocab import CONV_SLOTS, TRANSFORMER_SITES, TRANSFORMER_SLOTS

KINDS = ("conv", "transformer", "custom")


class GenomeSyntaxError(ContractError):
    def __init__(self, text: str, pos: int, msg: str):
        self.text, self.pos = text, pos
        super().__init__(f"genome text, column {pos + 1}: {msg}")


@dataclass(frozen=True)
class PatternGenome:
    kind: str
    groups: tuple
    labels: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown genome kind {self.kind!r}")
        if len(self.groups) != len(self.labels):
            raise ContractError("genome: one label per group required")
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        object.__setattr__(self, "labels", tuple(self.labels))

    def __str__(self) -> str:
        return format_genome(self)


@dataclass(frozen=True)
class SearchSpace:
    kind: str
    slots: tuple  # ((name, values), ...) for one group
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple((n, tuple(v)) for n, v in self.slots))
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ContractError("search space needs at least one group")
        for name, values in self.slots:
            if not values:
                raise ContractError(f"slot {name!r} has an empty vocabulary")
            if self.kind != "custom":
                canonical = dict(CONV_SLOTS if self.kind == "conv" else TRANSFORMER_SLOTS)
                if name not in canonical:
                    raise ContractError(f"{self.kind} space has no slot {name!r}")
                bad = [v for v in values if not _in_vocab(v, canonical[name])]
                if bad:
                    raise ContractError(f"slot {name!r}: values {bad} outside the vocabulary")
        if self.kind != "custom":
            expected = [n for n, _ in (CONV_SLOTS if self.kind == "conv" else TRANSFORMER_SLOTS)]
            if [n for n, _ in self.slots] != expected:
                raise ContractError(f"{self.kind} space must use slots {expected} in order")

    @property
    def slot_names(self) -> tuple:
        return tuple(n for n, _ in self.slots)

    @property
    def slot_sizes(self) -> tuple:
        """Vocabulary size of every flat token position."""
        return tuple(len(v) for _, v in self.slots) * len(self.labels)

    @property
    def n_tokens(self) -> int:
        return len(self.slots) * len(self.labels)

    @property
    def cardinality(self) -> int:
        return math.prod(self.slot_sizes)

    def slot_at(self, position: int) -> tuple:
        return self.slots[position % len(self.slots)]

    def to_genome(self, tokens) -> PatternGenome:
        tokens = tuple(int(t) for t in tokens)
        if len(tokens) != self.n_tokens:
            raise ContractError(f"expected {self.n_tokens} tokens, got {len(tokens)}")
        groups = []
        per = len(self.slots)
        for g in range(len(self.labels)):
            vals = []
            for s, (name, values) in enumerate(self.slots):
                t = tokens[g * per + s]
                if not 0 <= t < len(values):
                    raise ContractError(f"{self.labels[g]}.{name}: token {t} outside [0, {len(values)})")
                vals.append(values[t])
            groups.append(tuple(vals))
        return PatternGenome(self.kind, tuple(groups), self.labels)

    def to_tokens(self, genome: PatternGenome) -> tuple:
        self.validate(genome)
        out = []
        for group in genome.groups:
            for (name, values), v in zip(self.slots, group):
                out.append(_index_of(v, values))
        return tuple(out)

    def validate(self, genome: PatternGenome) -> None:
        if genome.kind != self.kind:
            raise ContractError(f"genome kind {genome.kind!r} does not match space kind {self.kind!r}")
        if genome.labels != self.labels:
            raise ContractError(f"genome groups {genome.labels} do not match space groups {self.labels}")
        for label, group in zip(genome.labels, genome.groups):
            if len(group) != len(self.slots):
                raise ContractError(f"{label}: expected {len(self.slots)} tokens, got {len(group)}")
            for (name, values), v in zip(self.slots, group):
                if _index_of(v, values) is None:
                    raise ContractError(f"{label}.{name}: value {v!r} not in vocabulary {list(values)}")

    def enumerate(self):
        """Every genome in the space; only sensible for small spaces."""
        for tokens in itertools.product(*[range(n) for n in self.slot_sizes]):
            yield self.to_genome(tokens)


def _in_vocab(v, values) -> bool:
    return _index_of(v, values) is not None


def _index_of(v, values):
    for i, u in enumerate(values):
        if isinstance(u, bool) or isinstance(v, (bool, np.bool_)):
            if isinstance(u, bool) and isinstance(v, (bool, np.bool_)) and bool(v) == u:
                return i
        elif isinstance(u, float) or isinstance(v, float):
            if abs(float(v) - float(u)) < 1e-9:
                return i
        elif v == u:
            return i
    return None


def conv_space(n_groups: int = 4, labels=None, **restrict) -> SearchSpace:
    labels = tuple(labels) if labels else tuple(f"group_{i + 1}" for i in range(n_groups))
    return SearchSpace("conv", _restricted(CONV_SLOTS, restrict), labels)


def transformer_space(sites=TRANSFORMER_SITES, **restrict) -> SearchSpace:
    sites = tuple(sites)
    unknown = [s for s in sites if s not in TRANSFORMER_SITES]
    if unknown or len(set(sites)) != len(sites):
        raise ContractError(f"bad transformer site list {list(sites)}")
    return SearchSpace("transformer", _restricted(TRANSFORMER_SLOTS, restrict), sites)


def _restricted(slots, restrict) -> tuple:
    names = [n for n, _ in slots]
    unknown = sorted(set(restrict) - set(names))
    if unknown:
        raise ContractError(f"cannot restrict unknown slots {unknown}")
    return tuple((n, tuple(restrict.get(n, v))) for n, v in slots)


# -- decoding ----------------------------------------------------------------------------

def decode_genome(genome: PatternGenome, layer_shapes=None):
    """ConvNet genome -> list of :class:`ConvPatternSpec` (one per group);
    Transformer genome -> ``{site: TransformerPatternSpec}``.

    ``layer_shapes`` (one per group), when given, must match the group count;
    rectangle sides are resolved against them at mask-sampling time.
    """
    if genome.kind == "conv":
        specs = []
        for label, g in zip(genome.labels, genome.groups):
            try:
                specs.append(ConvPatternSpec(
                    size_k=int(g[0]), stride=int(g[1]), repeat=int(g[2]), share_c=bool(g[3]),
                    residual=bool(g[4]), rotate_max=int(g[5]),
                    shear_x_max=_canon(g[6], "shear_x"), shear_y_max=_canon(g[7], "shear_y")))
            except (ContractError, IndexError, TypeError, ValueError) as e:
                raise ContractError(f"{label}: {e}") from None
        if layer_shapes is not None:
            if len(layer_shapes) != len(specs):
                raise ContractError(f"{len(specs)} groups but {len(layer_shapes)} layer shapes")
        return specs
    if genome.kind == "transformer":
        out = {}
        for label, g in zip(genome.labels, genome.groups):
            try:
                out[label] = TransformerPatternSpec(size=int(g[0]), stride=int(g[1]),
                                                    share_t=bool(g[2]), share_c=bool(g[3]))
            except (ContractError, IndexError, TypeError, ValueError) as e:
                raise ContractError(f"{label}: {e}") from None
        return out
    raise ContractError("custom genomes have no pattern decoding")


def _canon(v, slot: str) -> float:
    values = dict(CONV_SLOTS)[slot]
    i = _index_of(float(v), values)
    if i is None:
        raise ContractError(f"{slot}={v!r} not in vocabulary")
    return values[i]


def encode_genome(specs, labels=None) -> PatternGenome:
    """Inverse of :func:`decode_genome`."""
    if isinstance(specs, dict):
        groups = [(s.size, s.stride, s.share_t, s.share_c) for s in specs.values()]
        return PatternGenome("transformer", tuple(groups), tuple(specs))
    specs = list(specs)
    labels = tuple(labels) if labels else tuple(f"group_{i + 1}" for i in range(len(specs)))
    groups = [(s.size_k, s.stride, s.repeat, s.share_c, s.residual, s.rotate_max,
               s.shear_x_max, s.shear_y_max) for s in specs]
    return PatternGenome("conv", tuple(groups), labels)


SPECIAL_CASES = {
    "variational-dropout": TransformerPatternSpec(size=70, stride=0, share_t=True, share_c=False),
    "word-dropout": TransformerPatternSpec(size=70, stride=0, share_t=False, share_c=True),
    "none-at-site": TransformerPatternSpec(size=0, stride=0, share_t=False, share_c=False),
}


def encode_special(case: str, sites=TRANSFORMER_SITES, only=None) -> PatternGenome:
    """Genome realising a classic regulariser at ``only`` (default: every site).

    Sites outside ``only`` are disabled.
    """
    if case not in SPECIAL_CASES:
        raise ContractError(f"unknown special case {case!r}; expected one of {sorted(SPECIAL_CASES)}")
    sites = tuple(sites)
    chosen = set(sites if only is None else ([only] if isinstance(only, str) else only))
    if not chosen <= set(sites):
        raise ContractError(f"sites {sorted(chosen - set(sites))} not in layout")
    off = SPECIAL_CASES["none-at-site"]
    return encode_genome({s: SPECIAL_CASES[case] if s in chosen else off for s in sites})


def is_variational_dropout(spec: TransformerPatternSpec, seq_len: int = 70) -> bool:
    return spec.share_t and not spec.share_c and spec.size >= seq_len and spec.stride == 0


def is_word_dropout(spec: TransformerPatternSpec) -> bool:
    return spec.share_c and spec.size > 0


def is_disabled(spec: TransformerPatternSpec) -> bool:
    return spec.size == 0


def uniform_random_genome(space: SearchSpace, rng: np.random.Generator) -> PatternGenome:
    tokens = [int(rng.integers(n)) for n in space.slot_sizes]
    return space.to_genome(tokens)


# -- text format -----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(round(v, 6)).rstrip("0").rstrip(".") if v != int(v) else str(int(v))
    return str(v)


def format_genome(genome: PatternGenome, slot_names=None) -> str:
    if slot_names is None:
        if genome.kind == "conv":
            slot_names = [n for n, _ in CONV_SLOTS]
        elif genome.kind == "transformer":
            slot_names = [n for n, _ in TRANSFORMER_SLOTS]
        else:
            slot_names = [f"t{i}" for i in range(len(genome.groups[0]) if genome.groups else 0)]
    parts = [genome.kind]
    for label, group in zip(genome.labels, genome.groups):
        body = ",".join(f"{n}={_fmt(v)}" for n, v in zip(slot_names, group))
        parts.append(f"{label}:{body}")
    return ";".join(parts)


_LABEL = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def parse_genome(text: str, space: SearchSpace | None = None) -> PatternGenome:
    """Parse the text format; validates against ``space`` (or the canonical vocabulary)."""
    if not text or not text.strip():
        raise GenomeSyntaxError(text, 0, "empty genome")
    pieces = _split_with_pos(text, ";")
    kind_pos, kind = pieces[0]
    kind = kind.strip()
    if kind not in ("conv", "transformer"):
        raise GenomeSyntaxError(text, kind_pos, f"kind must be 'conv' or 'transformer', got {kind!r}")
    slots = space.slots if space is not None else (CONV_SLOTS if kind == "conv" else TRANSFORMER_SLOTS)
    names = [n for n, _ in slots]
    labels, groups = [], []
    for pos, piece in pieces[1:]:
        if ":" not in piece:
            raise GenomeSyntaxError(text, pos, "expected '<label>:<slot>=<value>,...'")
        label, body = piece.split(":", 1)
        body_pos = pos + len(label) + 1
        label = label.strip()
        if not _LABEL.match(label):
            raise GenomeSyntaxError(text, pos, f"bad group label {label!r}")
        values = {}
        for kv_pos, kv in _split_with_pos(body, ","):
            at = body_pos + kv_pos
            if "=" not in kv:
                raise GenomeSyntaxError(text, at, f"expected slot=value, got {kv.strip()!r}")
            k, v = (s.strip() for s in kv.split("=", 1))
            if k not in names:
                raise GenomeSyntaxError(text, at, f"unknown slot {k!r} (expected one of {names})")
            if k in values:
                raise GenomeSyntaxError(text, at, f"slot {k!r} given twice")
            vocab = dict(slots)[k]
            parsed = _parse_value(v)
            idx = None if parsed is None else _index_of(parsed, vocab)
            if idx is None:
                raise GenomeSyntaxError(text, at, f"{label}.{k}: value {v!r} not in vocabulary {list(vocab)}")
            values[k] = vocab[idx]
        missing = [n for n in names if n not in values]
        if missing:
            raise GenomeSyntaxError(text, pos, f"{label}: missing slots {missing}")
        labels.append(label)
        groups.append(tuple(values[n] for n in names))
    if not groups:
        raise GenomeSyntaxError(text, len(text), "genome has no groups")
    genome = PatternGenome(kind, tuple(groups), tuple(labels))
    if space is not None:
        space.validate(genome)
    return genome


def _parse_value(v: str):
    low = v.lower()
    if low in ("true", "t"):
        return True
    if low in ("false", "f"):
        return False
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return None


def _split_with_pos(text: str, sep: str) -> list[tuple[int, str]]:
    out, start = [], 0
    for i, ch in enumerate(text):
        if ch == sep:
            out.append((start, text[start:i]))
            start = i + 1
    out.append((start, text[start:]))
    return [(p, s) for p, s in out if s.strip() or p == 0]
