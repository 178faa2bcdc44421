import numpy as np
import pytest

from gencad.cadlang import CadCommand, CadSequence
from gencad.geometry import GeometryError, execute, volume_estimate
from gencad.imaging import (canny, gaussian_blur, make_sketch, preprocess_for_encoder, read_pgm,
                            render_isometric, resize_bilinear, scale_sequence, scale_variants,
                            write_pgm)
from conftest import box_program, bracket_program


@pytest.fixture(scope="module")
def cube_render():
    return render_isometric(execute(box_program()), 128)


def test_render_background_and_determinism(cube_render):
    again = render_isometric(execute(box_program()), 128)
    np.testing.assert_array_equal(cube_render, again)
    assert cube_render.dtype == np.uint8
    assert cube_render[0, 0] == 0 and cube_render[-1, -1] == 0
    assert (cube_render > 0).mean() > 0.2


def test_cube_shows_three_flat_shades(cube_render):
    vals, counts = np.unique(cube_render[cube_render > 0], return_counts=True)
    plateaus = vals[counts > 0.05 * counts.sum()]
    assert len(plateaus) == 3
    # the plateaus hold nearly every lit pixel; the rest are silhouette/edge pixels
    assert counts[counts > 0.05 * counts.sum()].sum() > 0.95 * counts.sum()


def test_empty_solid_does_not_render():
    seq = CadSequence((
        CadCommand.sol(), CadCommand.circle(0, 0, 0.2), CadCommand.extrude(0.2),
        CadCommand.sol(), CadCommand.circle(0, 0, 0.2),
        CadCommand.extrude(0.2, origin=(0.0, 0.0, 0.6), op=3),
    ))
    with pytest.raises(GeometryError):
        render_isometric(execute(seq), 32)


def test_canny_constant_and_step():
    assert not canny(np.full((32, 32), 0.5)).any()
    img = np.zeros((40, 40))
    img[:, 20:] = 1.0
    edges = canny(img)
    interior = edges[8:-8, 8:-8]
    cols = np.flatnonzero(interior.any(0))
    assert len(cols) == 1 and abs(cols[0] + 8 - 19.5) <= 1
    assert interior[:, cols[0]].all()


def test_blur_preserves_mass():
    img = np.zeros((64, 64))
    img[20:40, 25:35] = 1.0
    assert abs(gaussian_blur(img, 1.5).sum() - img.sum()) / img.sum() < 0.005


def test_sketch_of_render(cube_render):
    sk = make_sketch(cube_render)
    assert sk.dtype == np.uint8 and sk.shape == cube_render.shape
    assert 0 < (sk > 0).mean() < 0.5


def test_preprocess():
    np.testing.assert_array_equal(preprocess_for_encoder(np.full((448, 448), 0.5)), 0)
    np.testing.assert_array_equal(preprocess_for_encoder(np.full((448, 448), 1.0)), 1)
    out = preprocess_for_encoder(np.zeros((448, 448), dtype=np.uint8))
    assert out.shape == (256, 256) and out.dtype == np.float32


def test_resize_preserves_checkerboard_mean():
    yy, xx = np.mgrid[:448, :448]
    board = (((yy // 16) + (xx // 16)) % 2).astype(float)
    assert abs(resize_bilinear(board, 256).mean() - board.mean()) < 0.01 * board.mean()


def test_identity_variant_survives():
    seq = bracket_program()
    v = scale_variants(seq, [(1.0, 1.0, 1.0)])[0]
    assert v.ok and v.sequence == seq


def test_stretched_cube_doubles_volume():
    a = volume_estimate(execute(box_program()), 200_000)
    b = volume_estimate(execute(scale_sequence(box_program(), (2.0, 1.0, 1.0))), 200_000)
    assert abs(b.value / a.value - 2.0) < 0.02


def test_out_of_range_variant_is_dropped_with_reason():
    tall = CadSequence((CadCommand.sol(), CadCommand.circle(0, 0, 0.3), CadCommand.extrude(0.9)))
    v = scale_variants(tall, [(1.0, 1.0, 1.5)])[0]
    assert not v.ok and v.reason


def test_pgm_roundtrip(tmp_path, cube_render):
    write_pgm(cube_render, tmp_path / "a.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), cube_render)
    with pytest.raises(ValueError):
        write_pgm(cube_render.astype(float), tmp_path / "b.pgm")
