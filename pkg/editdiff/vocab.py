"""Read and write corpus and vocabulary files.

Corpus files are UTF-8 text with one sequence per line. Tokens are separated
by whitespace, and an optional TAB separates the prompt from the target. EOS
is implicit: it is appended on load and never written.

Vocabulary files hold one symbol per line. The reserved sentinels are
appended automatically and must not be listed.
"""

import logging
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

from editdiff.types import CorpusError, Sequence, Vocab, VocabError

logger = logging.getLogger(__name__)

Corpus = List[Sequence]
RawLine = Tuple[Tuple[str, ...], Tuple[str, ...]]


def split_line(line: str) -> RawLine:
    """Split one corpus line into (prompt symbols, target symbols)."""
    if "\t" in line:
        prompt, target = line.split("\t", 1)
    else:
        prompt, target = "", line
    return tuple(prompt.split()), tuple(target.split())


def iter_raw_lines(path: Path) -> Iterator[Tuple[int, RawLine]]:
    """Generate (line number, (prompt, target)) for each non-blank line."""
    with path.open(encoding="utf-8") as corpus_file:
        for lineno, line in enumerate(corpus_file, start=1):
            if not line.strip():
                continue
            prompt, target = split_line(line.rstrip("\n"))
            if not target:
                raise CorpusError(f"{path}:{lineno}: empty target")
            yield lineno, (prompt, target)


def read_vocab(path: Path) -> Vocab:
    """Read a vocabulary file; the sentinels are appended."""
    logger.info(f"Parsing vocabulary file {path}")
    with path.open(encoding="utf-8") as vocab_file:
        symbols = [line.strip() for line in vocab_file if line.strip()]
    try:
        return Vocab.build(symbols)
    except VocabError as exc:
        raise VocabError(f"{path}: {exc.msg}") from exc


def write_vocab(path: Path, vocab: Vocab) -> None:
    reserved = set(vocab.reserved_ids)
    lines = [s for i, s in enumerate(vocab.symbols) if i not in reserved]
    path.write_text("".join(f"{s}\n" for s in lines), encoding="utf-8")
    logger.info(f"Wrote {len(lines)} symbols to {path}")


def read_corpus(path: Path, vocab: Optional[Vocab] = None) -> Tuple[Vocab, Corpus]:
    """Read a corpus file into a list of complete Sequences.

    When no vocabulary is given, one is built from the symbols in order of
    first appearance.
    """
    logger.info(f"Parsing corpus file {path}")
    raw = list(iter_raw_lines(path))
    if not raw:
        raise CorpusError(f"{path}: corpus is empty")
    if vocab is None:
        vocab = Vocab.build(s for _, (p, t) in raw for s in p + t)
    corpus = []
    for lineno, (prompt, target) in raw:
        try:
            corpus.append(vocab.sequence(target, prompt))
        except VocabError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc.msg}") from exc
    return vocab, corpus


def format_sequence(vocab: Vocab, seq: Sequence) -> str:
    """Render a complete sequence as one corpus line (EOS dropped)."""
    prompt = " ".join(vocab.decode(seq.prompt))
    region = [t for t in seq.region if t != vocab.eos_id]
    target = " ".join(vocab.decode(region))
    return f"{prompt}\t{target}" if seq.prompt_len else target


def write_corpus(path: Path, vocab: Vocab, corpus: Iterable[Sequence]) -> None:
    lines = [format_sequence(vocab, seq) for seq in corpus]
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    logger.info(f"Wrote {len(lines)} sequences to {path}")
