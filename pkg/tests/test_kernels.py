"""The numba and numpy kernel twins must agree."""
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from gencad import _accel, kernels
from gencad.geometry import build_profile
from gencad.imaging import canny, render_isometric
from gencad.cadlang import CadCommand
from gencad.geometry import execute
from conftest import bracket_program

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba missing")


def _profile_table():
    loops = [
        [CadCommand.line(0.8, 0.0), CadCommand.arc(0.8, 0.6, math.pi, 1),
         CadCommand.line(0.0, 0.6), CadCommand.line(0.0, 0.0)],
        [CadCommand.circle(0.4, 0.3, 0.1)],
        [CadCommand.line(-0.5, 0.0), CadCommand.arc(-0.5, -0.5, math.pi / 2, 0),
         CadCommand.line(0.0, -0.5), CadCommand.line(0.0, 0.0)],
    ]
    return build_profile(loops).table()


def test_profile_sdf_backends_agree(both_backends, rng):
    pts = rng.uniform(-1.5, 1.5, (5000, 2))
    table = _profile_table()
    a, b = both_backends(lambda: kernels.profile_sdf(pts, table))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert (np.sign(a) == np.sign(b)).all()


def test_nn_backends_agree(both_backends, rng):
    x, y = rng.standard_normal((700, 3)), rng.standard_normal((600, 3))
    (da, ia), (db, ib) = both_backends(lambda: kernels.nn_sqdist_brute(x, y))
    np.testing.assert_array_equal(ia, ib)
    np.testing.assert_allclose(da, db, rtol=1e-15, atol=0)


def test_nms_backends_agree(both_backends, rng):
    mag = rng.random((40, 50))
    gx, gy = rng.standard_normal((2, 40, 50))
    a, b = both_backends(lambda: kernels.non_max_suppression(mag, gx, gy))
    np.testing.assert_array_equal(a, b)


def test_jacobi_backends_agree(both_backends, rng):
    m = rng.standard_normal((9, 9))
    a = m @ m.T
    (wa, va), (wb, vb) = both_backends(lambda: kernels.jacobi_eigh(a))
    np.testing.assert_allclose(wa, wb, atol=1e-12)
    np.testing.assert_allclose(np.abs(va), np.abs(vb), atol=1e-10)
    np.testing.assert_allclose(np.sort(wa), np.linalg.eigvalsh(a), atol=1e-9)
    np.testing.assert_allclose(va @ np.diag(wa) @ va.T, a, atol=1e-9)


def test_render_and_canny_backends_agree(both_backends):
    solid = execute(bracket_program())

    def run():
        img = render_isometric(solid, 64)
        return img, canny(img)
    (ia, ea), (ib, eb) = both_backends(run)
    np.testing.assert_array_equal(ia, ib)
    np.testing.assert_array_equal(ea, eb)


def test_env_flag_selects_numpy_backend():
    code = "from gencad import _accel; print(_accel.backend())"
    env = dict(os.environ, GENCAD_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numpy"
    env["GENCAD_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numba"
