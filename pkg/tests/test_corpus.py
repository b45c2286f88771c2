import logging

import numpy as np
import pytest

from chaincrf.corpus import (
    CorpusError,
    corpus_from_pairs,
    format_corpus,
    parse_corpus,
    read_corpus,
    synth_corpus,
)
from chaincrf.model import LabelAlphabet


class TestParse:
    def test_single_sequence(self):
        c = parse_corpus("a\tX\nb\tY\n\n")
        assert len(c) == 1
        inst = c.instances[0]
        assert inst.observations == ("a", "b")
        assert [c.alphabet.labels[y] for y in inst.labels] == ["X", "Y"]

    def test_final_blank_optional(self):
        c = parse_corpus("a\tX\n\nb\tY\nc\tX")
        assert [i.length for i in c.instances] == [1, 2]

    def test_labels_sorted(self):
        c = parse_corpus("a\tZ\nb\tA\nc\tM\n")
        assert c.alphabet.labels == ("A", "M", "Z")
        assert c.instances[0].labels == (2, 0, 1)

    def test_empty_input(self):
        with pytest.raises(CorpusError) as exc:
            parse_corpus("")
        assert exc.value.code == "empty-corpus"
        with pytest.raises(CorpusError):
            parse_corpus("\n\n\n")

    def test_crlf(self):
        crlf = parse_corpus("a\tX\r\nb\tY\r\n\r\n")
        lf = parse_corpus("a\tX\nb\tY\n\n")
        assert crlf.instances == lf.instances
        assert crlf.alphabet == lf.alphabet

    def test_missing_tab_reports_line(self):
        with pytest.raises(CorpusError) as exc:
            parse_corpus("a\tX\n\nb\tY\nbroken\n")
        assert exc.value.code == "missing-tab"
        assert exc.value.line == 4

    def test_empty_sequence_skipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            c = parse_corpus("a\tX\n\n\nb\tY\n\n\n\nc\tX\n")
        assert len(c) == 3
        assert c.skipped == 3  # each blank line after the first is an empty sequence
        assert "skipped 3" in caplog.text

    def test_unknown_label_at_inference(self):
        alphabet = LabelAlphabet(("X", "Y"))
        with pytest.raises(CorpusError) as exc:
            parse_corpus("a\tX\nb\tQ\n", alphabet=alphabet)
        assert exc.value.code == "unknown-label"
        assert exc.value.line == 2

    def test_unlabeled(self):
        c = parse_corpus("a\nb\tignored\n\nc\n", labeled=False)
        assert [i.observations for i in c.instances] == [("a", "b"), ("c",)]
        assert not c.labeled

    def test_read_file(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_bytes("ä\tX\r\n".encode("utf-8"))
        assert read_corpus(p).instances[0].observations == ("ä",)

    def test_format_round_trip(self):
        c = synth_corpus(3, 3, 7, 4, 5)
        back = parse_corpus(format_corpus(c))
        assert back.alphabet == c.alphabet
        assert back.instances == c.instances

    def test_from_pairs(self):
        c = corpus_from_pairs([[("a", "Y"), ("b", "X")]])
        assert c.alphabet.labels == ("X", "Y")
        assert c.instances[0].labels == (1, 0)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_corpus(7, 3, 10, 5, 6), synth_corpus(7, 3, 10, 5, 6)
        assert a.instances == b.instances
        assert synth_corpus(8, 3, 10, 5, 6).instances != a.instances

    def test_single_label(self):
        c = synth_corpus(1, 1, 10, 3, 4)
        assert all(set(i.labels) == {0} for i in c.instances)

    def test_shape(self):
        c = synth_corpus(2, 4, 9, 6, 12)
        assert len(c) == 6 and all(i.length == 9 for i in c.instances)
        assert c.alphabet.size == 4
        assert c.vocabulary() <= {f"w{k:02d}" for k in range(12)}

    def test_transition_frequencies(self):
        c = synth_corpus(5, 3, 400, 25, 4)
        trans = c.meta["generator"].transition
        counts = np.zeros((3, 3))
        for inst in c.instances:
            prev = 0
            for y in inst.labels:
                counts[prev, y] += 1
                prev = y
        for a in range(3):
            total = counts[a].sum()
            p = trans[a]
            sigma = np.sqrt(total * p * (1 - p))
            assert np.all(np.abs(counts[a] - total * p) <= 3 * sigma + 1e-9)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            synth_corpus(0, 0, 5, 5, 5)
