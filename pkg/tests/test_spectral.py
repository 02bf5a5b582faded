import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xtkd import autodiff as ad
from xtkd.audits import bound_audit, random_bound_instance
from xtkd.distill import Projector
from xtkd.exceptions import BoundsError, DegeneracyError, ShapeError
from xtkd.linalg import frob_norm, svd, truncated_reconstruct
from xtkd.spectral import (
    SpectrumTrace,
    decoupled_bound,
    read_trace_csv,
    spectral_reg_grad,
    spectral_reg_loss,
    tape_spectral,
    track_spectrum,
    write_trace_csv,
)

matrices = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 7), st.integers(1, 7)),
    elements=st.floats(-10, 10, allow_nan=False, width=64),
)


# -- tail loss -----------------------------------------------------------------

def test_rank_one_has_empty_tail(rng):
    z = np.outer(rng.standard_normal(5), rng.standard_normal(4))
    assert spectral_reg_loss(z, 2) == pytest.approx(0.0, abs=1e-10)


def test_diagonal_tail_values():
    assert spectral_reg_loss(np.diag([3.0, 2.0, 1.0]), 2) == pytest.approx(math.sqrt(5), abs=1e-12)
    assert spectral_reg_loss(np.diag([3.0, 2.0]), 1) == pytest.approx(math.sqrt(13), abs=1e-12)


def test_tail_matches_lapack_singular_values():
    rng = np.random.default_rng(8)
    for _ in range(50):
        m, n = rng.integers(1, 9, size=2)
        z = rng.standard_normal((m, n))
        sig = np.linalg.svd(z, compute_uv=False)
        r = int(rng.integers(1, len(sig) + 1))
        assert spectral_reg_loss(z, r) == pytest.approx(np.sqrt(np.sum(sig[r - 1:] ** 2)), abs=1e-10)


def test_r_out_of_range():
    z = np.ones((3, 2))
    for r in (0, 3):
        with pytest.raises(BoundsError):
            spectral_reg_loss(z, r)


@given(matrices)
def test_full_tail_is_frobenius(z):
    assert abs(spectral_reg_loss(z, 1) - frob_norm(z)) <= 1e-10 * max(1.0, frob_norm(z))


@given(matrices)
def test_tail_non_increasing_in_r(z):
    vals = [spectral_reg_loss(z, r) for r in range(1, min(z.shape) + 1)]
    assert all(b <= a + 1e-10 * max(1.0, a) for a, b in zip(vals, vals[1:]))


# -- gradient ------------------------------------------------------------------

def test_diagonal_gradient():
    g = spectral_reg_grad(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(g, np.diag([0.0, 2.0, 1.0]) / math.sqrt(5), atol=1e-12)


def test_zero_tail_gives_zero_gradient():
    z = np.zeros((5, 4))
    z[1, 2] = 3.0
    np.testing.assert_array_equal(spectral_reg_grad(z, 2), 0.0)
    np.testing.assert_array_equal(spectral_reg_grad(np.diag([2.0, 1.0, 0.0]), 3), 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    u, _ = np.linalg.qr(rng.standard_normal((6, 4)))
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    z = (u * [4.0, 2.5, 1.5, 0.5]) @ v.T
    g = spectral_reg_grad(z, 2)
    eps = 1e-6
    num = np.zeros_like(z)
    for i in range(6):
        for j in range(4):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += eps
            zm[i, j] -= eps
            num[i, j] = (spectral_reg_loss(zp, 2) - spectral_reg_loss(zm, 2)) / (2 * eps)
    rel = np.abs(g - num).max() / max(np.abs(num).max(), 1e-12)
    assert rel < 1e-3


def test_degenerate_gap_raises():
    with pytest.raises(DegeneracyError):
        spectral_reg_grad(np.eye(3), 2)
    t = ad.Tape()
    with pytest.raises(DegeneracyError):
        tape_spectral(t.leaf(np.eye(3)), 3)


def test_r_one_never_degenerate():
    np.testing.assert_allclose(spectral_reg_grad(np.eye(3), 1), np.eye(3) / math.sqrt(3), atol=1e-12)


def test_tape_op_matches_functions(rng):
    z = rng.standard_normal((6, 4))
    t = ad.Tape()
    leaf = t.leaf(z)
    out = tape_spectral(leaf, 3)
    assert out.value[0, 0] == pytest.approx(spectral_reg_loss(z, 3), abs=1e-12)
    g = ad.TapeGraph(lambda t, z: tape_spectral(z, 3), ("z",))
    ad.forward(g, {"z": z})
    np.testing.assert_allclose(ad.backward(g)["z"], spectral_reg_grad(z, 3), atol=1e-12)


# -- decoupled bound -----------------------------------------------------------

def test_bound_tight_when_student_equals_projected_teacher(rng):
    z_t = rng.standard_normal((8, 10))
    p = rng.standard_normal((10, 6))
    rep = decoupled_bound(z_t @ p, z_t, p)
    assert rep.k_set_size == 6
    for v in (rep.lhs, rep.kt, rep.reg, rep.slack):
        assert abs(v) < 1e-10


def test_bound_tight_for_zero_projector(rng):
    z_s = rng.standard_normal((8, 6))
    rep = decoupled_bound(z_s, rng.standard_normal((8, 10)), np.zeros((10, 6)))
    assert rep.k_set_size == 0 and rep.kt == 0.0
    assert rep.reg == pytest.approx(frob_norm(z_s), abs=1e-12)
    assert rep.lhs == pytest.approx(frob_norm(z_s), abs=1e-12)
    assert abs(rep.slack) < 1e-10


def test_bound_accepts_projector_objects(rng):
    p = Projector.new(6, 10, "inverted", 0)
    z_s, z_t = rng.standard_normal((8, 6)), rng.standard_normal((8, 10))
    assert decoupled_bound(z_s, z_t, p) == decoupled_bound(z_s, z_t, p.weights)


def test_bound_rank_three_projectors():
    rng = np.random.default_rng(4)
    for _ in range(200):
        z_s, z_t = rng.standard_normal((8, 6)), rng.standard_normal((8, 10))
        s = svd(rng.standard_normal((10, 6)))
        p = truncated_reconstruct(s, 3)
        rep = decoupled_bound(z_s, z_t, p)
        assert rep.slack >= -1e-9
        assert rep.k_set_size == 3


def test_bound_shape_errors(rng):
    with pytest.raises(ShapeError):
        decoupled_bound(np.ones((8, 6)), np.ones((8, 10)), np.ones((6, 10)))
    with pytest.raises(ShapeError):
        decoupled_bound(np.ones((7, 6)), np.ones((8, 10)), np.ones((10, 6)))


@given(st.integers(0, 2**32 - 1))
def test_bound_never_violated(seed):
    rep = decoupled_bound(*random_bound_instance(np.random.default_rng(seed)))
    assert rep.holds


@given(st.integers(0, 2**32 - 1))
def test_full_retention_has_zero_reg(seed):
    rng = np.random.default_rng(seed)
    n, d_s, d_t = 10, int(rng.integers(1, 6)), int(rng.integers(6, 9))
    z_s, z_t = rng.standard_normal((n, d_s)), rng.standard_normal((n, d_t))
    p = rng.standard_normal((d_t, d_s))
    rep = decoupled_bound(z_s, z_t, p)
    assert rep.k_set_size == d_s
    assert rep.reg == pytest.approx(0.0, abs=1e-12)
    assert rep.lhs <= rep.kt + 1e-9


def test_bound_audit_summary():
    audit = bound_audit(50, seed=1)
    assert audit.n_holds == 50 and audit.min_slack >= -1e-9


# -- spectrum tracking ---------------------------------------------------------

def test_orthogonal_projector_spectrum_is_flat(rng):
    q, _ = np.linalg.qr(rng.standard_normal((7, 4)))
    tr = track_spectrum(q, 0, SpectrumTrace())
    np.testing.assert_allclose(tr.spectra[0], 1.0, atol=1e-12)
    assert tr.ranks == [4]


def test_zero_projector_spectrum():
    tr = track_spectrum(np.zeros((5, 3)), 2, SpectrumTrace())
    np.testing.assert_array_equal(tr.spectra[0], 0.0)
    assert tr.final_rank() == 0


def test_forced_rank_two(rng):
    s = svd(rng.standard_normal((8, 5)))
    p = truncated_reconstruct(s, 2)
    ratio = s.sigma[1] / s.sigma[0]
    for tol in (1e-6, 1e-2, ratio * (1 - 1e-9)):
        tr = track_spectrum(p, 0, SpectrumTrace(tol=tol))
        assert tr.final_rank() == 2


@given(matrices)
def test_spectra_sorted_and_normalised(p):
    tr = track_spectrum(p, 1, SpectrumTrace())
    s = tr.spectra[0]
    assert np.all(np.diff(s) <= 0)
    if tr.raw[0][0] > 0:
        assert s[0] == 1.0


def test_trace_csv_round_trip(rng):
    tr = SpectrumTrace()
    for e in (5, 10, 15):
        track_spectrum(rng.standard_normal((6, 3)), e, tr)
    buf = io.StringIO()
    write_trace_csv(buf, tr)
    assert buf.getvalue().splitlines()[0] == "epoch,eff_rank,sigma_0,sigma_1,sigma_2,raw_sigma_0,raw_sigma_1,raw_sigma_2"
    buf.seek(0)
    back = read_trace_csv(buf)
    assert back.epochs == tr.epochs and back.ranks == tr.ranks
    for a, b in zip(back.raw, tr.raw):
        np.testing.assert_array_equal(a, b)
