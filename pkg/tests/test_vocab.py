"""Verify reading and writing of corpus and vocabulary files."""

import pytest

from editdiff.types import CorpusError, Vocab, VocabError
from editdiff.vocab import (
    format_sequence,
    read_corpus,
    read_vocab,
    split_line,
    write_corpus,
    write_vocab,
)


@pytest.mark.parametrize(
    "line,expect",
    [
        pytest.param("a b c", ((), ("a", "b", "c")), id="no_prompt"),
        pytest.param("p q\ta b", (("p", "q"), ("a", "b")), id="prompt_and_target"),
        pytest.param("\ta", ((), ("a",)), id="empty_prompt_before_tab"),
    ],
)
def test_split_line__various_lines__split_on_tab(line, expect):
    assert split_line(line) == expect


def test_read_corpus__no_vocab__builds_vocab_in_order_of_appearance(write_tmp_files):
    tmp_path = write_tmp_files(
        {
            "corpus.txt": """\
                calc\t2 + 2 = 4

                calc\t3 + 2 = 5
                """,
        }
    )
    vocab, corpus = read_corpus(tmp_path / "corpus.txt")
    assert vocab.symbols[:7] == ("calc", "2", "+", "=", "4", "3", "5")
    assert len(corpus) == 2
    assert all(x.prompt_len == 1 for x in corpus)
    assert corpus[0].tokens[-1] == vocab.eos_id
    assert vocab.render(corpus[1]) == "calc | 3 + 2 = 5"


def test_read_corpus__empty_target__raises_corpus_error(write_tmp_files):
    tmp_path = write_tmp_files({"corpus.txt": "calc\t\n"})
    with pytest.raises(CorpusError, match="empty target"):
        read_corpus(tmp_path / "corpus.txt")


def test_read_corpus__blank_file__raises_corpus_error(write_tmp_files):
    tmp_path = write_tmp_files({"corpus.txt": "\n\n"})
    with pytest.raises(CorpusError, match="corpus is empty"):
        read_corpus(tmp_path / "corpus.txt")


def test_read_corpus__symbol_outside_given_vocab__raises_corpus_error(
    write_tmp_files,
):
    tmp_path = write_tmp_files({"corpus.txt": "a b\na q\n"})
    with pytest.raises(CorpusError, match=":2:"):
        read_corpus(tmp_path / "corpus.txt", Vocab.build("ab"))


def test_read_vocab__listed_sentinel__raises_vocab_error(write_tmp_files):
    tmp_path = write_tmp_files({"v.vocab": "a\n<mask>\n"})
    with pytest.raises(VocabError):
        read_vocab(tmp_path / "v.vocab")


def test_write_corpus__then_read__gives_same_sequences(tmp_path, three_sums):
    path = tmp_path / "sums.txt"
    write_corpus(path, three_sums.vocab, three_sums.corpus)
    write_vocab(path.with_suffix(".vocab"), three_sums.vocab)
    assert path.read_text().splitlines()[0] == "calc\t2 + 2 = 4"

    vocab = read_vocab(path.with_suffix(".vocab"))
    assert vocab == three_sums.vocab
    _, corpus = read_corpus(path, vocab)
    assert tuple(corpus) == three_sums.corpus


def test_format_sequence__no_prompt__has_no_tab():
    vocab = Vocab.build("ab")
    assert format_sequence(vocab, vocab.sequence("ab")) == "a b"
