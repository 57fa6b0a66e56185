"""Word n-gram language model (interpolated Kneser-Ney), ARPA I/O and lexicon files.

Everything is in log10, like the ARPA format. The model is stored in backoff
form: for a listed n-gram the table holds the interpolated probability; for a
listed context the backoff weight is the interpolation mass ``D * N1+(h .) / A(h)``,
so querying through the backoff recursion reproduces the interpolated model.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
ARPA_NO_PROB = -99.0


class ArpaError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class NGramLm:
    order: int
    probs: list                 # probs[n][tuple of n words] -> log10 p, n = 1..order (index 0 unused)
    backoffs: dict = field(default_factory=dict)   # tuple -> log10 backoff

    @property
    def vocab(self) -> set:
        return {g[0] for g in self.probs[1]}

    def counts(self) -> list[int]:
        return [len(self.probs[n]) for n in range(1, self.order + 1)]

    def map_word(self, w: str) -> str:
        return w if (w,) in self.probs[1] else UNK

    def score(self, word: str, context=()) -> float:
        """log10 P(word | context); unknown words map to <unk>, context truncated to order-1."""
        w = self.map_word(word)
        ctx = tuple(self.map_word(c) for c in context)[-(self.order - 1):] if self.order > 1 else ()
        bow = 0.0
        for k in range(len(ctx), -1, -1):
            h = ctx[len(ctx) - k:]
            p = self.probs[k + 1].get(h + (w,))
            if p is not None:
                return bow + p
            bow += self.backoffs.get(h, 0.0)
        raise KeyError(f"{w!r} missing from the unigram table")

    def sentence_logprob(self, words) -> float:
        ctx = [BOS]
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.score(w, ctx)
            ctx.append(w)
        return total


# ---------------------------------------------------------------- training

def _split(sentence) -> list[str]:
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def train_ngram(corpus, order: int = 4, discount: float = 0.75) -> NGramLm:
    """Interpolated Kneser-Ney with a single fixed discount.

    The top order uses raw counts; lower orders use continuation counts,
    except n-grams that start with ``<s>`` (no left context), which keep raw counts.
    """
    sents = [_split(s) for s in corpus]
    if not sents:
        raise ValueError("train_ngram: empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must be in (0, 1)")

    raw = [Counter() for _ in range(order + 1)]
    for words in sents:
        toks = [BOS] + words + [EOS]
        for n in range(1, order + 1):
            for i in range(len(toks) - n + 1):
                g = tuple(toks[i:i + n])
                if n == 1 and g == (BOS,):
                    continue
                raw[n][g] += 1

    adjusted = [Counter() for _ in range(order + 1)]
    adjusted[order] = Counter(raw[order])
    for n in range(order - 1, 0, -1):
        left_types = Counter()
        for g in raw[n + 1]:
            left_types[g[1:]] += 1
        for g, c in raw[n].items():
            adjusted[n][g] = c if g[0] == BOS else left_types.get(g, 0)
        # n-grams only ever seen after <s> still need a continuation count
        for g in list(adjusted[n]):
            if adjusted[n][g] == 0:
                adjusted[n][g] = raw[n][g]

    vocab = sorted({w for s in sents for w in s} | {EOS, UNK})
    probs = [dict() for _ in range(order + 1)]
    backoffs = {}

    # per-context totals and type counts for each order
    def context_stats(n):
        tot, types = defaultdict(int), defaultdict(int)
        for g, a in adjusted[n].items():
            tot[g[:-1]] += a
            types[g[:-1]] += 1
        return tot, types

    tot1, types1 = context_stats(1)
    A, N1 = tot1[()], types1[()]
    gamma = discount * N1 / A
    lin = [dict() for _ in range(order + 1)]   # linear-domain interpolated probabilities
    for w in vocab:
        a = adjusted[1].get((w,), 0)
        lin[1][(w,)] = max(a - discount, 0.0) / A + gamma / len(vocab)

    lower_gamma = {}
    for n in range(2, order + 1):
        tot, types = context_stats(n)
        g_ctx = {h: discount * types[h] / tot[h] for h in tot}
        for g, a in adjusted[n].items():
            h = g[:-1]
            lin[n][g] = (a - discount) / tot[h] + g_ctx[h] * _lin_lookup(lin, lower_gamma, g[1:])
        lower_gamma.update(g_ctx)

    for n in range(1, order + 1):
        probs[n] = {g: math.log10(p) for g, p in lin[n].items()}
    probs[1][(BOS,)] = ARPA_NO_PROB
    for h, gm in lower_gamma.items():
        backoffs[h] = math.log10(gm)
    return NGramLm(order, probs, backoffs)


def _lin_lookup(lin, gammas, g) -> float:
    """Interpolated probability of the n-gram ``g`` from already-built lower orders."""
    p = lin[len(g)].get(g)
    if p is not None:
        return p
    return gammas.get(g[:-1], 1.0) * _lin_lookup(lin, gammas, g[1:])


# ---------------------------------------------------------------- perplexity

@dataclass
class Perplexity:
    ppl: float
    ppl_no_oov: float
    n_words: int
    n_sentences: int
    n_oov: int


def perplexity(lm: NGramLm, corpus) -> Perplexity:
    total = total_known = 0.0
    n_tok = n_known = n_oov = n_sent = 0
    for s in corpus:
        words = _split(s)
        n_sent += 1
        ctx = [BOS]
        for w in words + [EOS]:
            lp = lm.score(w, ctx)
            total += lp
            n_tok += 1
            if w != EOS and (w,) not in lm.probs[1]:
                n_oov += 1
            else:
                total_known += lp
                n_known += 1
            ctx.append(w)
    if n_tok == 0:
        raise ValueError("perplexity: empty corpus")
    return Perplexity(10 ** (-total / n_tok), 10 ** (-total_known / max(n_known, 1)),
                      n_tok - n_sent, n_sent, n_oov)


# ---------------------------------------------------------------- ARPA

def _fmt(x: float) -> str:
    return repr(float(x))


def arpa_text(lm: NGramLm) -> str:
    lines = ["", "\\data\\"]
    for n in range(1, lm.order + 1):
        lines.append(f"ngram {n}={len(lm.probs[n])}")
    for n in range(1, lm.order + 1):
        lines += ["", f"\\{n}-grams:"]
        for g in sorted(lm.probs[n]):
            row = f"{_fmt(lm.probs[n][g])}\t{' '.join(g)}"
            if n < lm.order and g in lm.backoffs:
                row += f"\t{_fmt(lm.backoffs[g])}"
            lines.append(row)
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def write_arpa(lm: NGramLm, path) -> None:
    Path(path).write_text(arpa_text(lm), encoding="utf-8")


def read_arpa(path) -> NGramLm:
    text = Path(path).read_text(encoding="utf-8")
    return parse_arpa(text)


def parse_arpa(text: str) -> NGramLm:
    lines = text.splitlines()
    i = 0
    while i < len(lines) and lines[i].strip() != "\\data\\":
        i += 1
    if i == len(lines):
        raise ArpaError("missing \\data\\ header")
    i += 1
    declared = {}
    while i < len(lines) and lines[i].strip():
        ln = lines[i].strip()
        if not ln.startswith("ngram ") or "=" not in ln:
            raise ArpaError(f"malformed count line {ln!r}", i + 1)
        n_str, c_str = ln[6:].split("=", 1)
        try:
            declared[int(n_str)] = int(c_str)
        except ValueError:
            raise ArpaError(f"malformed count line {ln!r}", i + 1) from None
        i += 1
    if not declared:
        raise ArpaError("no ngram counts in \\data\\ section", i + 1)
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise ArpaError(f"orders {sorted(declared)} are not contiguous from 1")
    probs = [dict() for _ in range(order + 1)]
    backoffs = {}
    cur = None
    seen_end = False
    for j in range(i, len(lines)):
        ln = lines[j].strip()
        if not ln:
            continue
        if ln == "\\end\\":
            seen_end = True
            break
        if ln.startswith("\\"):
            if not (ln.endswith("-grams:") and ln[1:-7].isdigit()):
                raise ArpaError(f"malformed section header {ln!r}", j + 1)
            cur = int(ln[1:-7])
            if cur not in declared:
                raise ArpaError(f"section for undeclared order {cur}", j + 1)
            continue
        if cur is None:
            raise ArpaError("n-gram line outside a section", j + 1)
        parts = ln.split()
        if len(parts) not in (cur + 1, cur + 2):
            raise ArpaError(f"expected {cur} words in {ln!r}", j + 1)
        try:
            lp = float(parts[0])
            bo = float(parts[cur + 1]) if len(parts) == cur + 2 else None
        except ValueError:
            raise ArpaError(f"bad number in {ln!r}", j + 1) from None
        g = tuple(parts[1:cur + 1])
        probs[cur][g] = lp
        if bo is not None:
            backoffs[g] = bo
    if not seen_end:
        raise ArpaError("missing \\end\\ marker")
    for n, c in declared.items():
        if len(probs[n]) != c:
            raise ArpaError(f"order {n}: header says {c} n-grams, found {len(probs[n])}")
    if (UNK,) not in probs[1]:
        # toolchains may omit <unk>; give it the smallest listed probability
        probs[1][(UNK,)] = min(v for g, v in probs[1].items() if g != (BOS,))
    return NGramLm(order, probs, backoffs)


# ---------------------------------------------------------------- lexicon

class LexiconError(ValueError):
    pass


@dataclass
class Lexicon:
    """word -> character spelling. Words are joined by the separate boundary token."""

    spellings: dict

    def __len__(self):
        return len(self.spellings)

    def words(self) -> list[str]:
        return list(self.spellings)

    def validate(self, tokens) -> None:
        allowed = set(tokens.chars) | {tokens.apostrophe}
        for w, sp in self.spellings.items():
            if not sp:
                raise LexiconError(f"empty spelling for {w!r}")
            bad = [c for c in sp if c not in allowed]
            if bad:
                raise LexiconError(f"spelling of {w!r} uses non-word tokens {bad}")

    @classmethod
    def from_words(cls, words) -> "Lexicon":
        return cls({w: list(w) for w in sorted(set(words))})


def write_lexicon(lex: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w, sp in lex.spellings.items():
            fh.write(f"{w}\t{' '.join(sp)}\n")


def read_lexicon(path) -> Lexicon:
    spellings = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise LexiconError(f"{path}:{ln}: expected 'word<TAB>spelling'")
            w, sp = line.split("\t", 1)
            toks = sp.split()
            if not toks:
                raise LexiconError(f"{path}:{ln}: empty spelling for {w!r}")
            spellings[w] = toks
    return Lexicon(spellings)
