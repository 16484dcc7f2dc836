import numpy as np
import pytest

from leakfix.corpus import (BINDINGS, CorpusError, get_entry, load_corpus, make_binding,
                            rotr, to_bytes, words)
from leakfix.model import ModelConfig
from leakfix.pipeline import campaign

ENTRIES = [e.name for e in load_corpus()]


def test_manifest_lists_all_kernels():
    assert set(ENTRIES) == {"shiftrows", "reg-reuse", "bus-bytes", "store-latch",
                            "masked-xor-round", "quarter-round"}
    for e in load_corpus():
        assert e.expected_causes
        assert e.fixed_input is not None and len(e.fixed_input) == e.binding.input_size


@pytest.mark.parametrize("name", ENTRIES)
def test_functional_oracle(name):
    e = get_entry(name)
    assert e.check_functional(n=500, seed=1)
    for b in e.variants.values():
        assert e.check_functional(n=500, seed=2, binding=b)


def test_shiftrows_reference_by_hand():
    e = get_entry("shiftrows")
    state = np.arange(16, dtype=np.uint8)[None, :]
    rows = e.binding.reference(state).reshape(4, 4)
    assert rows[1].tolist() == [5, 6, 7, 4]
    assert rows[2].tolist() == [10, 11, 8, 9]
    assert rows[3].tolist() == [15, 12, 13, 14]


def test_word_helpers():
    b = np.array([[1, 2, 3, 4, 0xFF, 0, 0, 0x80]], dtype=np.uint8)
    w = words(b)
    assert w.tolist() == [[0x04030201, 0x800000FF]]
    assert to_bytes(w).reshape(1, 8).tolist() == b.tolist()
    assert int(rotr(np.uint32(1), 1)) == 0x80000000
    assert int(rotr(np.uint32(5), 32)) == 5


def test_masks_are_fresh_per_trace():
    e = get_entry("reg-reuse")
    rng = np.random.default_rng(0)
    secrets = np.zeros((1000, 8), dtype=np.uint8)
    st = e.binding.make_state(e.program, secrets, rng)
    assert len(set(st.regs[4].tolist())) > 990
    assert len(set(st.regs[7].tolist())) > 990


@pytest.mark.parametrize("name", ENTRIES)
def test_expected_causes_flagged(name):
    e = get_entry(name)
    fixed = [np.frombuffer(e.fixed_input, dtype=np.uint8)]
    rep = campaign(e.program, e.binding, ModelConfig.default(), fixed, 10_000, 4.5, 0)
    causes = {s.cause for s in rep.flagged()}
    assert e.expected_causes <= causes


def test_unknown_names():
    with pytest.raises(CorpusError):
        get_entry("nope")
    with pytest.raises(CorpusError):
        make_binding("nope")
    assert "arx-shares" in BINDINGS
