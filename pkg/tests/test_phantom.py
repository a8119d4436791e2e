import numpy as np
import pytest

from u3spat.geometry import RingGeometry, build_spiral_schedule, rotation_step, sampling_rate
from u3spat.phantom import (
    ChromophorePhantom,
    PhantomError,
    Primitive,
    SpectralError,
    SpectralLibrary,
    acquire_u3s,
    default_phantom,
    render_slice,
)
from u3spat.physics import ForwardOperator, ImageGrid, make_time_grid

LIB = SpectralLibrary.default()
GRID = ImageGrid(48, 25.4)


def disc(x=0.0, y=0.0, r=3.0, hbo2=1.0, hb=0.0, z=(-10.0, 10.0)):
    knots = np.array([[z[0], x, y], [z[1], x, y]])
    return Primitive("disc", knots, r, r, hbo2=hbo2, hb=hb)


def test_zero_phantom_renders_zero():
    ph = ChromophorePhantom([disc(hbo2=0.0, hb=0.0)], 0.0, 0.0, (-10, 10))
    assert not render_slice(ph, 0.0, 760, LIB, GRID).any()


def test_single_disc_values():
    ph = ChromophorePhantom([disc(r=5.0)], 0.0, 0.0, (-10, 10))
    for w in LIB.wavelengths:
        img = render_slice(ph, 0.0, w, LIB, GRID)
        X, Y = GRID.mesh()
        r = np.hypot(X, Y)
        assert np.allclose(img[r < 4.0], LIB.coefficients(w)[0])
        assert np.allclose(img[r > 6.0], 0.0)


def test_straight_tube_shifts_with_slope():
    slope = 0.4  # mm lateral per mm axial
    knots = np.array([[-10.0, -10 * slope, 0.0], [10.0, 10 * slope, 0.0]])
    tube = Primitive("tube", knots, 2.0, 2.0, hbo2=1.0)
    ph = ChromophorePhantom([tube], z_extent=(-10, 10))
    grid = ImageGrid(127, 25.4)
    a = ph.concentrations(0.0, grid)[0]
    b = ph.concentrations(0.5, grid)[0]
    X, _ = grid.mesh()
    ca = (a * X).sum() / a.sum()
    cb = (b * X).sum() / b.sum()
    assert cb - ca == pytest.approx(slope * 0.5, abs=0.02)


def test_unknown_wavelength_and_bad_z():
    ph = default_phantom(0)
    with pytest.raises(SpectralError):
        render_slice(ph, 0.0, 999.0, LIB, GRID)
    with pytest.raises(PhantomError):
        render_slice(ph, 1e4, 760.0, LIB, GRID)


def test_primitive_validation():
    with pytest.raises(PhantomError):
        Primitive("cube", np.zeros((1, 3)), 1, 1)
    with pytest.raises(PhantomError):
        Primitive("disc", np.array([[1.0, 0, 0], [0.0, 0, 0]]), 1, 1)
    with pytest.raises(PhantomError):
        Primitive("disc", np.zeros((1, 3)), 1, 1, hbo2=-1)


def test_library_validation_and_round_trip(tmp_path):
    with pytest.raises(SpectralError):
        SpectralLibrary((700.0,), (0.0,), (1.0,))
    p = tmp_path / "lib.txt"
    LIB.save(p)
    assert SpectralLibrary.load(p) == LIB
    assert np.linalg.matrix_rank(LIB.matrix()) == 2


def test_default_phantom_shape():
    ph = default_phantom(0)
    assert 6 <= len(ph.primitives) <= 10
    for p in ph.primitives:
        k = p.knots
        step = np.hypot(np.diff(k[:, 1]), np.diff(k[:, 2])) / np.diff(k[:, 0])
        assert np.all(step <= 0.3 / 0.5 + 1e-9)
        assert np.all(np.hypot(k[:, 1], k[:, 2]) + p.radius_a * k[:, 3].max() < 25.4 / 2 * 1.2)


def test_phantom_round_trip(tmp_path):
    ph = default_phantom(3)
    p = tmp_path / "ph.ini"
    ph.save(p)
    back = ChromophorePhantom.load(p)
    a = render_slice(ph, 1.0, 760, LIB, GRID)
    b = render_slice(back, 1.0, 760, LIB, GRID)
    assert np.array_equal(a, b)


def test_stack_is_rank_two():
    ph = default_phantom(0)
    stack = np.array([render_slice(ph, 2.0, w, LIB, GRID).ravel() for w in LIB.wavelengths])
    s = np.linalg.svd(stack, compute_uv=False)
    assert s[2] / s[0] < 1e-10


def test_slice_correlation_decreases_with_distance():
    ph = default_phantom(0)
    grid = ImageGrid(64, 25.4)
    ref = render_slice(ph, 10.0, 760, LIB, grid).ravel()
    corr = [np.corrcoef(ref, render_slice(ph, 10.0 + dz, 760, LIB, grid).ravel())[0, 1] for dz in (0.5, 1, 2, 4, 8)]
    assert all(a >= b - 1e-12 for a, b in zip(corr, corr[1:]))


def test_acquire_u3s_records_and_volume():
    grid = ImageGrid(24, 25.4)
    sparse = RingGeometry(num_elements=21)
    dense = RingGeometry(num_elements=128)
    tg = make_time_grid(dense, grid, fs=10e6)
    sched = build_spiral_schedule(5, 0.0, 0.5, LIB.wavelengths, rotation_step(sparse.pitch, 5))
    acq = acquire_u3s(default_phantom(0), sched, sparse, grid, tg, LIB, dense)
    assert len(acq.sparse) == 5
    assert [s.wavelength_nm for s in acq.sparse] == list(LIB.wavelengths)
    assert [s.theta for s in acq.sparse] == [r.theta_deg for r in sched.records]
    assert acq.data_volume_ratio == pytest.approx(sampling_rate(21, 128, 5).rate)
    assert acq.data_volume_ratio == pytest.approx(1 / 30.476, rel=1e-4)


def test_zero_spacing_sinograms_differ_only_by_angle_and_wavelength():
    grid = ImageGrid(24, 25.4)
    sparse = RingGeometry(num_elements=4)
    tg = make_time_grid(sparse, grid, fs=10e6)
    sched = build_spiral_schedule(6, 0.0, 0.0, LIB.wavelengths, 10.0)
    acq = acquire_u3s(default_phantom(0), sched, sparse, grid, tg, LIB)
    # slices 1 and 6 share wavelength; same z so only the rotation differs
    img = render_slice(default_phantom(0), 0.0, LIB.wavelengths[0], LIB, grid)
    for m in (1, 6):
        op = ForwardOperator(grid, sparse.rotated(sched.record(m).theta_deg), tg)
        assert np.allclose(acq.sparse[m - 1].samples, op.apply(img))
