import json

import pytest

from hybridloss.conll import ConllFormatError, read_conll, sidecar_path, write_conll
from hybridloss.synthdata import ChunkCorpus, SynthChunkSpec, generate_chunk_corpus


@pytest.fixture
def corpus():
    return generate_chunk_corpus(SynthChunkSpec(sentence_count=15, ambiguity_rate=0.0, seed=2))


def _write(tmp_path, text, tags=("O", "B-NP", "I-NP"), vocab=("a", "b")):
    path = tmp_path / "d.conll"
    path.write_bytes(text.encode())
    sidecar_path(path).write_text(json.dumps({"version": 1, "tags": list(tags), "vocabulary": list(vocab)}))
    return path


def test_round_trip_is_exact(tmp_path, corpus):
    a, b = tmp_path / "a.conll", tmp_path / "b.conll"
    write_conll(corpus, a)
    back = read_conll(a)
    assert back.instances == corpus.instances
    assert back.vocabulary == corpus.vocabulary and back.tags == corpus.tags
    write_conll(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_two_sentence_layout(tmp_path):
    path = _write(tmp_path, "a B-NP\nb I-NP\n\nb O\n")
    c = read_conll(path)
    assert [i.gold_tags for i in c.instances] == [(1, 2), (0,)]
    write_conll(c, tmp_path / "again.conll")
    assert (tmp_path / "again.conll").read_bytes() == path.read_bytes()


def test_empty_file(tmp_path):
    path = tmp_path / "e.conll"
    path.write_bytes(b"")
    assert read_conll(path).instances == []
    write_conll(ChunkCorpus([], ["a"], ["O"]), path)
    assert path.read_bytes() == b"" and read_conll(path).instances == []


@pytest.mark.parametrize("text,line,msg", [
    ("a O\nb O extra\n", 2, "3"),
    ("a O\nb X\n", 2, "unknown tag"),
    ("a O\nzz O\n", 2, "unknown token"),
    ("a O\nb O", 2, "final newline"),
    ("a O\n\n\nb O\n", 3, "empty sentence"),
])
def test_errors_name_line(tmp_path, text, line, msg):
    with pytest.raises(ConllFormatError, match=msg) as info:
        read_conll(_write(tmp_path, text))
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


def test_sidecar_problems(tmp_path):
    path = tmp_path / "x.conll"
    path.write_bytes(b"a O\n")
    with pytest.raises(ConllFormatError, match="sidecar missing"):
        read_conll(path)
    sidecar_path(path).write_text(json.dumps({"version": 9, "tags": ["O"], "vocabulary": ["a"]}))
    with pytest.raises(ConllFormatError, match="version"):
        read_conll(path)


def test_writer_rejects_whitespace_tokens(tmp_path, corpus):
    bad = ChunkCorpus(corpus.instances, ["a b"] + corpus.vocabulary[1:], corpus.tags)
    with pytest.raises(ValueError):
        write_conll(bad, tmp_path / "w.conll")
