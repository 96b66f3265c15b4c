"""Text frontend: stutter-token transcripts, annotations and G2P.

A transcript may carry special control tokens (``s_repetition``,
``s_phonation``, ``s_block``) placed immediately before the word they
affect. Parsing strips the tokens into word-indexed events; rendering puts
them back. G2P maps every word to phonemes via a toy lexicon with a
per-letter fallback, and maps each event to a special stutter phoneme
placed directly before the affected word's first phoneme.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field


class ParseError(ValueError):
    pass


class StutterType(enum.Enum):
    REPETITION = "repetition"
    PHONATION = "phonation"
    BLOCK = "block"


TYPE_TO_TOKEN = {
    StutterType.REPETITION: "s_repetition",
    StutterType.PHONATION: "s_phonation",
    StutterType.BLOCK: "s_block",
}
TOKEN_TO_TYPE = {v: k for k, v in TYPE_TO_TOKEN.items()}

TYPE_TO_PHONEME = {
    StutterType.REPETITION: "s_rep",
    StutterType.PHONATION: "s_phon",
    StutterType.BLOCK: "s_block",
}

SILENCE = "SIL"
WORD_BOUNDARY = "WB"
STUTTER_PHONEMES = tuple(TYPE_TO_PHONEME[t] for t in StutterType)

# Relative frequencies of the three stutter types in annotated stuttered
# speech (percent of utterances): repetition 40.11, phonation 21.40,
# block 15.59. Renormalized over the three types when drawing.
RAW_TYPE_WEIGHTS = {
    StutterType.REPETITION: 40.11,
    StutterType.PHONATION: 21.40,
    StutterType.BLOCK: 15.59,
}


def default_type_distribution():
    total = sum(RAW_TYPE_WEIGHTS.values())
    return {t: w / total for t, w in RAW_TYPE_WEIGHTS.items()}


@dataclass(frozen=True)
class StutterEvent:
    type: StutterType
    word_index: int


@dataclass
class AnnotatedText:
    words: list[str]
    events: list[StutterEvent] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for ev in self.events:
            if not 0 <= ev.word_index < len(self.words):
                raise ParseError(
                    f"event index {ev.word_index} out of range for "
                    f"{len(self.words)} words")
            if ev.word_index in seen:
                raise ParseError(
                    f"multiple stutter events for word {ev.word_index}")
            seen.add(ev.word_index)

    def event_at(self, word_index: int) -> StutterEvent | None:
        for ev in self.events:
            if ev.word_index == word_index:
                return ev
        return None


def normalize(raw: str) -> str:
    """Lowercase, strip punctuation (underscores survive for tokens),
    collapse whitespace."""
    text = raw.lower()
    text = re.sub(r"[^a-z0-9_\s]", "", text)
    return " ".join(text.split())


def parse_transcript(raw: str) -> AnnotatedText:
    tokens = normalize(raw).split()
    words: list[str] = []
    events: list[StutterEvent] = []
    pending: StutterType | None = None
    for tok in tokens:
        if tok in TOKEN_TO_TYPE:
            if pending is not None:
                raise ParseError(f"stacked stutter tokens before word {len(words)}")
            pending = TOKEN_TO_TYPE[tok]
        elif tok.startswith("s_"):
            raise ParseError(f"unknown stutter token {tok!r}")
        else:
            if pending is not None:
                events.append(StutterEvent(pending, len(words)))
                pending = None
            words.append(tok)
    if pending is not None:
        raise ParseError("trailing stutter token with no following word")
    return AnnotatedText(words, events)


def render_transcript(t: AnnotatedText) -> str:
    out = []
    for i, word in enumerate(t.words):
        ev = t.event_at(i)
        if ev is not None:
            out.append(TYPE_TO_TOKEN[ev.type])
        out.append(word)
    return " ".join(out)


def insert_random_stutter(words, type_distribution=None,
                          rng=None) -> AnnotatedText:
    """Annotate a word list with exactly one stutter event.

    The position is uniform over all word indices; the type is drawn from
    the given distribution (default: annotated-corpus frequencies,
    renormalized).
    """
    if not words:
        raise ParseError("cannot insert a stutter into an empty word list")
    if type_distribution is None:
        type_distribution = default_type_distribution()
    types = list(type_distribution.keys())
    probs = [type_distribution[t] for t in types]
    total = sum(probs)
    probs = [p / total for p in probs]
    idx = int(rng.integers(len(words)))
    r = rng.random()
    acc = 0.0
    chosen = types[-1]
    for t, p in zip(types, probs):
        acc += p
        if r < acc:
            chosen = t
            break
    return AnnotatedText(list(words), [StutterEvent(chosen, idx)])


class Lexicon:
    """word -> phoneme list, with a total per-letter fallback.

    The fallback maps each letter/digit to its own pseudo-phoneme and
    collapses consecutive duplicates so that rendered runs stay 1:1 with
    phonemes.
    """

    def __init__(self, entries: dict[str, list[str]]):
        self.entries = dict(entries)

    def phonemes(self, word: str) -> list[str]:
        if word in self.entries:
            return list(self.entries[word])
        out: list[str] = []
        for ch in word:
            p = f"L_{ch.upper()}"
            if not out or out[-1] != p:
                out.append(p)
        return out

    def ordinary_phonemes(self) -> list[str]:
        """All phonemes the lexicon (and its fallback) can ever emit."""
        syms = set()
        for ph in self.entries.values():
            syms.update(ph)
        for ch in "abcdefghijklmnopqrstuvwxyz0123456789":
            syms.add(f"L_{ch.upper()}")
        return sorted(syms)

    @classmethod
    def load(cls, path) -> "Lexicon":
        entries = {}
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                if "\t" not in line:
                    raise ParseError(f"{path}:{ln}: expected word<TAB>phonemes")
                word, phones = line.split("\t", 1)
                entries[word] = phones.split()
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for word in sorted(self.entries):
                f.write(f"{word}\t{' '.join(self.entries[word])}\n")


# A small lexicon of common words. No entry has two identical consecutive
# phonemes (the synthetic renderer relies on run/phoneme correspondence).
_DEFAULT_ENTRIES = {
    "please": ["P", "L", "IY", "Z"],
    "call": ["K", "AO", "L"],
    "mom": ["M", "AA", "M"],
    "hello": ["HH", "EH", "L", "OW"],
    "world": ["W", "ER", "L", "D"],
    "the": ["DH", "AH"],
    "a": ["AH"],
    "i": ["AY"],
    "you": ["Y", "UW"],
    "we": ["W", "IY"],
    "they": ["DH", "EY"],
    "go": ["G", "OW"],
    "come": ["K", "AH", "M"],
    "home": ["HH", "OW", "M"],
    "now": ["N", "AW"],
    "later": ["L", "EY", "T", "ER"],
    "today": ["T", "AH", "D", "EY"],
    "want": ["W", "AA", "N", "T"],
    "need": ["N", "IY", "D"],
    "see": ["S", "IY"],
    "say": ["S", "EY"],
    "tell": ["T", "EH", "L"],
    "me": ["M", "IY"],
    "my": ["M", "AY"],
    "your": ["Y", "AO", "R"],
    "his": ["HH", "IH", "Z"],
    "her": ["HH", "ER"],
    "good": ["G", "UH", "D"],
    "bad": ["B", "AE", "D"],
    "big": ["B", "IH", "G"],
    "small": ["S", "M", "AO", "L"],
    "dog": ["D", "AO", "G"],
    "cat": ["K", "AE", "T"],
    "bird": ["B", "ER", "D"],
    "house": ["HH", "AW", "S"],
    "water": ["W", "AO", "T", "ER"],
    "food": ["F", "UW", "D"],
    "time": ["T", "AY", "M"],
    "day": ["D", "EY"],
    "night": ["N", "AY", "T"],
    "friend": ["F", "R", "EH", "N", "D"],
    "speak": ["S", "P", "IY", "K"],
    "listen": ["L", "IH", "S", "AH", "N"],
    "read": ["R", "IY", "D"],
    "book": ["B", "UH", "K"],
    "open": ["OW", "P", "AH", "N"],
    "close": ["K", "L", "OW", "Z"],
    "door": ["D", "AO", "R"],
    "again": ["AH", "G", "EH", "N"],
    "thanks": ["TH", "AE", "NG", "K", "S"],
}


def default_lexicon() -> Lexicon:
    return Lexicon(_DEFAULT_ENTRIES)


def default_word_list() -> list[str]:
    return sorted(_DEFAULT_ENTRIES)


def short_word_list(max_phonemes: int) -> list[str]:
    """Vocabulary restricted to words of at most max_phonemes phonemes."""
    out = [w for w, ph in sorted(_DEFAULT_ENTRIES.items())
           if len(ph) <= max_phonemes]
    if not out:
        raise ParseError(f"no words with at most {max_phonemes} phonemes")
    return out


class PhonemeInventory:
    """Ordered symbol table: silence, word boundary, ordinary phonemes,
    then the three stutter phonemes. Line number = id in the on-disk form."""

    def __init__(self, symbols: list[str]):
        if len(set(symbols)) != len(symbols):
            raise ParseError("duplicate symbols in phoneme inventory")
        self.symbols = list(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        for required in (SILENCE, WORD_BOUNDARY, *STUTTER_PHONEMES):
            if required not in self.ids:
                raise ParseError(f"inventory missing symbol {required!r}")

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self.ids[symbol]

    def symbol(self, pid: int) -> str:
        return self.symbols[pid]

    @classmethod
    def build(cls, lexicon: Lexicon) -> "PhonemeInventory":
        ordinary = lexicon.ordinary_phonemes()
        clash = set(ordinary) & {SILENCE, WORD_BOUNDARY, *STUTTER_PHONEMES}
        if clash:
            raise ParseError(f"ordinary phonemes clash with reserved: {clash}")
        return cls([SILENCE, WORD_BOUNDARY] + ordinary + list(STUTTER_PHONEMES))

    @classmethod
    def load(cls, path) -> "PhonemeInventory":
        with open(path, encoding="utf-8") as f:
            symbols = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(symbols)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(s + "\n")


def g2p_symbols(t: AnnotatedText, lexicon: Lexicon,
                with_events: bool = True) -> list[str]:
    """Phoneme symbol sequence: SIL, words separated by WB, SIL.

    Each stutter event contributes its special phoneme directly before the
    first phoneme of the affected word.
    """
    out = [SILENCE]
    for i, word in enumerate(t.words):
        if i > 0:
            out.append(WORD_BOUNDARY)
        ev = t.event_at(i) if with_events else None
        if ev is not None:
            out.append(TYPE_TO_PHONEME[ev.type])
        out.extend(lexicon.phonemes(word))
    out.append(SILENCE)
    return out


def g2p(t: AnnotatedText, lexicon: Lexicon,
        inventory: PhonemeInventory) -> list[int]:
    """Phoneme id sequence for the encoder."""
    return [inventory.id(s) for s in g2p_symbols(t, lexicon)]
