import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xkd.seq import (
    PROMPT_ONLY,
    PROMPT_RESPONSE,
    TEACHER_BEHAVIOR,
    Dataset,
    DatasetFormatError,
    Vocab,
    expand_quadruples,
    load_dataset,
    n_steps,
    write_dataset,
)
from xkd.oracle import indexed_sum, quadruple_sum

V = Vocab.with_content(4)
BOS, EOS = V.bos_id, V.eos_id


def test_vocab_invariants():
    with pytest.raises(ValueError):
        Vocab(2, 0, 1)
    with pytest.raises(ValueError):
        Vocab(5, 3, 3)
    with pytest.raises(ValueError):
        Vocab(5, 3, 5)
    assert V.n_actions == V.size - 1
    assert not V.action_mask[BOS] and V.action_mask[EOS]


def test_sequence_and_prompt_validation():
    with pytest.raises(ValueError):
        V.check_sequence((0, 1))
    with pytest.raises(ValueError):
        V.check_sequence((BOS, EOS, 1))
    with pytest.raises(ValueError):
        V.check_prompt(())
    with pytest.raises(ValueError):
        V.check_prompt((1, EOS))
    short = Vocab.with_content(4, max_len=2)
    with pytest.raises(ValueError):
        short.check_sequence((BOS, 1, 2, EOS))


def test_expand_empty():
    assert expand_quadruples((0,), (BOS,), V) == []


def test_expand_single_step():
    (q,) = expand_quadruples((0,), (BOS, 1), V)
    assert q.a == 1 and q.a_next is None and q.terminal


def test_expand_three_steps():
    qs = expand_quadruples((0,), (BOS, 1, 2, EOS), V)
    assert len(qs) == 3
    assert qs[1].s == ((0,), (BOS, 1)) and qs[1].a == 2 and qs[1].a_next == EOS
    assert qs[1].s_next == ((0,), (BOS, 1, 2))


def test_expand_rejects_missing_bos():
    with pytest.raises(ValueError):
        expand_quadruples((0,), (1, 2), V)


seqs = st.lists(st.sampled_from(V.content_ids), min_size=0, max_size=6).flatmap(
    lambda body: st.sampled_from([(BOS,) + tuple(body), (BOS,) + tuple(body) + (EOS,)]))


@given(y=seqs, x=st.lists(st.sampled_from(V.content_ids), min_size=1, max_size=3))
@settings(max_examples=100, deadline=None)
def test_expand_lossless_and_sum_consistency(y, x):
    qs = expand_quadruples(x, y, V)
    assert len(qs) == n_steps(y)
    assert tuple(q.a for q in qs) == y[1:]
    for q in qs:
        assert q.s_next == (q.s[0], q.s[1] + (q.a,))
    assert [q.terminal for q in qs] == [i == len(qs) - 1 for i in range(len(qs))]

    def f(s, a, s2, a2):
        return len(s[1]) * 0.37 + a * 1.3 - (0.0 if a2 is None else a2 * 0.11) + len(s2[1])
    assert quadruple_sum(x, y, f, V) == indexed_sum(x, y, f)


def test_load_empty(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    assert len(load_dataset(p, PROMPT_RESPONSE, V)) == 0


def test_load_prompt_response(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# comment\n1 2 | 3 0\n")
    ds = load_dataset(p, PROMPT_RESPONSE, V)
    assert ds.records == [((1, 2), (BOS, 3, 0))]


def test_load_teacher_behavior(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text(f"1 2 | 3 {EOS} ; 0 0\n")
    ds = load_dataset(p, TEACHER_BEHAVIOR, V)
    assert len(ds.records[0][1]) == 2
    assert ds.records[0][1][0] == (BOS, 3, EOS)


def test_load_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 | 2\n1 | x\n")
    with pytest.raises(DatasetFormatError) as e:
        load_dataset(p, PROMPT_RESPONSE, V)
    assert e.value.lineno == 2
    p.write_text(f"1 | {V.size}\n")
    with pytest.raises(DatasetFormatError) as e:
        load_dataset(p, PROMPT_RESPONSE, V)
    assert e.value.lineno == 1
    with pytest.raises(FileNotFoundError, match="nope"):
        load_dataset(tmp_path / "nope.txt", PROMPT_RESPONSE, V)


def test_write_load_round_trip(tmp_path):
    for kind, recs in [
        (PROMPT_ONLY, [(1, 2), (3,)]),
        (PROMPT_RESPONSE, [((1,), (BOS, 2, EOS)), ((0, 0), (BOS, 1))]),
        (TEACHER_BEHAVIOR, [((1,), [(BOS, 2, EOS), (BOS, 3)])]),
    ]:
        ds = Dataset(kind, recs)
        write_dataset(ds, tmp_path / "rt.txt", V)
        assert load_dataset(tmp_path / "rt.txt", kind, V).records == recs


def test_dataset_arity_checked():
    with pytest.raises(ValueError):
        Dataset(PROMPT_RESPONSE, [(1, 2)])
    with pytest.raises(ValueError):
        Dataset(TEACHER_BEHAVIOR, [((1,), [])])
