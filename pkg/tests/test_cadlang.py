import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencad.cadlang import (CLOSE_TOL, MASK, MASK_LEVEL, SLOT_RANGES, CadCommand,
                            CadFormatError, CadSequence, CommandType, active_mask, decode_sequence,
                            dequantize, encode_sequence, from_json, layout_of, quantize,
                            read_matrix, snap, to_json, validate, write_matrix)
from gencad.synth import sample_program

CONTINUOUS = [r for r in SLOT_RANGES if r is not None]


@pytest.mark.parametrize("lo,hi", sorted(set(CONTINUOUS)))
def test_levels_roundtrip_exactly(lo, hi):
    for level in range(256):
        assert quantize(dequantize(level, lo, hi), lo, hi) == level


@given(st.sampled_from(CONTINUOUS), st.floats(0, 1))
def test_quantization_error_bounded(rng_range, t):
    lo, hi = rng_range
    v = lo + t * (hi - lo)
    back = dequantize(quantize(v, lo, hi), lo, hi)
    assert abs(back - v) <= (hi - lo) / 510 + 1e-12


def test_quantize_clamps_and_rounds_half_away():
    assert quantize(-5, -1, 1) == 0
    assert quantize(5, -1, 1) == 255
    # exactly half a level above level 127 rounds up
    half = -1 + 127.5 / 255 * 2
    assert quantize(half, -1, 1) == 128
    with pytest.raises(ValueError):
        quantize(0, 1, 1)
    with pytest.raises(ValueError):
        dequantize(256, -1, 1)


def test_zero_is_not_on_the_coordinate_grid():
    z = snap(0.0, 0)
    assert z != 0.0 and abs(z) < 1 / 255 + 1e-12


def test_layouts():
    assert layout_of(CommandType.Line).symbols == ("x", "y")
    assert layout_of(CommandType.Arc).symbols == ("x", "y", "alpha", "f")
    assert layout_of(CommandType.Circle).symbols == ("x", "y", "r")
    assert len(layout_of(CommandType.Extrude).active_slots) == 11
    assert not layout_of(CommandType.SOL).mask.any()


def test_command_rejects_bad_slots():
    with pytest.raises(ValueError):
        CadCommand.make(CommandType.Line, x=0.1)
    with pytest.raises(ValueError):
        CadCommand.make(CommandType.Line, x=0.1, y=0.2, r=0.3)
    with pytest.raises(ValueError):
        CadCommand.line(2.0, 0.0)
    with pytest.raises(ValueError):
        CadCommand.arc(0.1, 0.1, 1.0, f=3)


@given(st.integers(0, 2 ** 32 - 1))
def test_synth_programs_roundtrip_through_matrix(seed):
    seq = sample_program(np.random.default_rng(seed))
    mat = encode_sequence(seq)
    assert mat.shape == (60, 17)
    assert (mat[len(seq):, 0] == CommandType.EOS).all()
    assert decode_sequence(mat) == seq


def test_masked_slots_use_mask_level():
    mat = encode_sequence(CadSequence((CadCommand.sol(), CadCommand.line(0.5, 0.5))))
    assert (mat[0, 1:] == MASK_LEVEL).all()
    assert mat[1, 1] == quantize(0.5, -1, 1) and (mat[1, 3:] == MASK_LEVEL).all()
    assert active_mask(mat)[1].tolist() == [True, True] + [False] * 14


def test_overflow_and_bad_rows():
    seq = CadSequence((CadCommand.sol(),) * 5, padded_len=4)
    with pytest.raises(CadFormatError, match="overflow"):
        encode_sequence(seq)
    bad = np.full((3, 17), MASK_LEVEL)
    bad[:, 0] = 9
    with pytest.raises(CadFormatError, match="token"):
        decode_sequence(bad)
    with pytest.raises(CadFormatError):
        decode_sequence(np.zeros((3, 5), dtype=int))


def test_matrix_sidecar(tmp_path, rng):
    mats = np.stack([encode_sequence(sample_program(rng)) for _ in range(3)])
    path = tmp_path / "m.gcsq"
    write_matrix(path, mats)
    np.testing.assert_array_equal(read_matrix(path), mats)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(CadFormatError, match="payload"):
        read_matrix(path)


@given(st.integers(0, 2 ** 32 - 1))
def test_json_roundtrip_is_exact_and_canonical(seed):
    seq = sample_program(np.random.default_rng(seed))
    text = to_json(seq)
    back = from_json(text)
    assert back == seq
    assert to_json(back) == text


def test_json_errors_carry_paths():
    with pytest.raises(CadFormatError, match=r"\$\.commands\[0\]\.type"):
        from_json('{"commands": [{"type": "Spline"}]}')
    with pytest.raises(CadFormatError, match=r"params\.x"):
        from_json('{"commands": [{"type": "Line", "params": {"x": "a", "y": 0}}]}')
    with pytest.raises(CadFormatError, match="missing"):
        from_json('{"padded_len": 60}')


def _rules(cmds):
    return validate(CadSequence(tuple(cmds))).rules


def test_validator_rules():
    sol, ext = CadCommand.sol(), CadCommand.extrude(0.3)
    sq = [CadCommand.line(0.5, 0), CadCommand.line(0.5, 0.5), CadCommand.line(0, 0.5),
          CadCommand.line(0, 0)]
    assert _rules([sol, *sq, ext]) == []
    assert "empty program" in _rules([])
    assert "open loop" in _rules([sol, *sq[:3], ext])
    assert "empty loop" in _rules([sol, ext])
    assert "extrude without profile" in _rules([sol, *sq, ext, ext])
    assert "missing extrude" in _rules([sol, *sq])
    assert "mixed loop" in _rules([sol, CadCommand.circle(0, 0, 0.2), *sq, ext])
    assert "curve outside loop" in _rules([CadCommand.line(0.1, 0.1), ext])
    assert "degenerate segment" in _rules([sol, CadCommand.line(0, 0), *sq, ext])
    assert "degenerate extrude" in _rules([sol, *sq, CadCommand.extrude(0.0)])
    assert "boolean before body" in _rules([sol, *sq, CadCommand.extrude(0.3, op=2)])
    assert "degenerate circle" in _rules([sol, CadCommand.circle(0, 0, 0.0), ext])
    assert "content after EOS" in _rules([sol, *sq, ext, CadCommand.eos(), sol])


def test_closure_tolerance_is_two_grid_steps():
    sol, ext = CadCommand.sol(), CadCommand.extrude(0.3)
    step = 2 / 255
    near = [CadCommand.line(0.5, 0), CadCommand.line(0.5, 0.5), CadCommand.line(0, 1.9 * step)]
    far = [CadCommand.line(0.5, 0), CadCommand.line(0.5, 0.5), CadCommand.line(0, 2.1 * step)]
    assert _rules([sol, *near, ext]) == []
    assert "open loop" in _rules([sol, *far, ext])
    assert math.isclose(CLOSE_TOL, 2 * step)


def test_mask_constant_is_negative_infinity():
    assert CadCommand.sol().params == (MASK,) * 16 and MASK == float("-inf")


def test_square_prism_golden_file():
    seq = CadSequence((CadCommand.sol(), CadCommand.line(0.5, 0.0), CadCommand.line(0.5, 0.5),
                       CadCommand.line(0.0, 0.5), CadCommand.line(0.0, 0.0),
                       CadCommand.extrude(0.5)))
    golden = (Path(__file__).parent / "data" / "square_prism.json").read_text()
    snapped = decode_sequence(encode_sequence(seq))
    assert to_json(snapped) == golden
    assert from_json(golden) == snapped
