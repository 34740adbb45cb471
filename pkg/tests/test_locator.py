import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from ultrapos.channel import SPEED_OF_SOUND as C
from ultrapos.errors import DegenerateGeometryError, InsufficientAnchorsError
from ultrapos.locator import PseudoRangeSet, gdop, jacobian, residuals, trilaterate

TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)


def exact(anchors, p, beta=0.0, t_s=0.0):
    d = np.linalg.norm(anchors - p, axis=1)
    return PseudoRangeSet(anchors, t_s + (d + beta) / C, C, t_s)


def test_tetrahedron_centroid():
    fix = trilaterate(exact(TETRA, np.zeros(3)))
    assert np.linalg.norm(fix.position) < 1e-6
    assert fix.converged


def test_clock_shift_absorbed_by_beta():
    a = trilaterate(exact(TETRA, np.array([0.2, -0.1, 0.3])))
    prs = exact(TETRA, np.array([0.2, -0.1, 0.3]))
    prs.toas = prs.toas + 0.005
    b = trilaterate(prs)
    assert np.linalg.norm(a.position - b.position) < 1e-9
    assert b.clock_term - a.clock_term == pytest.approx(C * 0.005, abs=1e-9)


def well_conditioned(rng, dims):
    while True:
        n = rng.integers(dims + 2, 9)
        anchors = rng.uniform(-5, 5, (n, 3))
        if dims == 2:
            anchors[:, 2] = rng.uniform(0.5, 2.5, n)
        p = rng.uniform(-3, 3, 3)
        if dims == 2:
            p[2] = 1.2
        prs = exact(anchors, p, beta=rng.uniform(-2, 2))
        try:
            g = gdop(prs, p, dims)
        except DegenerateGeometryError:
            continue
        if g < 20:
            return prs, p


@pytest.mark.parametrize("dims", [2, 3])
def test_random_exact_recovery(dims):
    rng = np.random.default_rng(dims)
    ok = 0
    for _ in range(200):
        prs, p = well_conditioned(rng, dims)
        fix = trilaterate(prs, dims=dims, z_fixed=1.2 if dims == 2 else None)
        ok += np.linalg.norm(fix.position - p) < 1e-6
    assert ok >= 198


@given(st.floats(-1e3, 1e3))
def test_clock_invariance(shift_ms):
    p = np.array([0.3, 0.4, -0.2])
    base = trilaterate(exact(TETRA * 3, p))
    prs = exact(TETRA * 3, p)
    prs.toas = prs.toas + shift_ms / 1000
    fix = trilaterate(prs)
    assert np.linalg.norm(fix.position - base.position) < 1e-9
    assert fix.clock_term - base.clock_term == pytest.approx(C * shift_ms / 1000, abs=1e-6)


@given(st.integers(0, 10_000))
def test_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(-4, 4, (6, 3))
    p = rng.uniform(-2, 2, 3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    shift = rng.uniform(-10, 10, 3)
    prs = exact(anchors, p)
    try:
        gdop(prs, p)
    except DegenerateGeometryError:
        assume(False)
    a = trilaterate(prs, reject_outliers=False)
    b = trilaterate(exact(anchors @ q.T + shift, q @ p + shift), reject_outliers=False)
    assert np.linalg.norm(q @ a.position + shift - b.position) < 1e-6


@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_jacobian_matches_finite_differences(seed, dims):
    rng = np.random.default_rng(seed)
    prs = PseudoRangeSet(rng.uniform(-5, 5, (6, 3)), rng.uniform(0, 0.03, 6))
    pos = rng.uniform(-3, 3, 3)
    beta = rng.uniform(-1, 1)
    j = jacobian(prs, pos, dims)
    h = 1e-6
    num = np.zeros_like(j)
    for k in range(dims):
        e = np.zeros(3)
        e[k] = h
        num[:, k] = (residuals(prs, pos + e, beta) - residuals(prs, pos - e, beta)) / (2 * h)
    num[:, -1] = (residuals(prs, pos, beta + h) - residuals(prs, pos, beta - h)) / (2 * h)
    assert np.allclose(j, num, rtol=1e-6, atol=1e-8)


def test_too_few_anchors():
    with pytest.raises(InsufficientAnchorsError):
        trilaterate(exact(TETRA[:3], np.zeros(3)))
    with pytest.raises(InsufficientAnchorsError):
        trilaterate(exact(TETRA[:2], np.zeros(3)), dims=2)


def test_collinear_2d_rejected():
    a = np.array([[0, 0, 1], [1, 0, 1], [2, 0, 1], [3, 0, 1]], float)
    with pytest.raises(DegenerateGeometryError):
        trilaterate(exact(a, np.array([1, 1, 1.0])), dims=2)
    with pytest.raises(DegenerateGeometryError):
        gdop(exact(a, np.array([1, 1, 1.0])), [1, 1, 1], dims=2)


def test_coplanar_3d_rejected():
    a = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1], [2, 3, 1]], float)
    with pytest.raises(DegenerateGeometryError):
        trilaterate(exact(a, np.array([0.5, 0.5, 0.0])))


def test_gdop_tetrahedron_frozen():
    # direct SVD/normal-equation computation at the centroid
    g = gdop(exact(TETRA, np.zeros(3)), np.zeros(3))
    h = np.column_stack([TETRA / np.linalg.norm(TETRA, axis=1)[:, None], np.ones(4)])
    assert g == pytest.approx(np.sqrt(np.trace(np.linalg.inv(h.T @ h))))
    assert g == pytest.approx(gdop(exact(TETRA, np.zeros(3)), np.zeros(3)))


def test_gdop_scale_invariant():
    p = np.array([0.1, 0.2, -0.3])
    g1 = gdop(exact(TETRA, p), p)
    g2 = gdop(exact(2 * TETRA, 2 * p), 2 * p)
    assert g1 == pytest.approx(g2)


def test_outlier_dropped():
    rng = np.random.default_rng(5)
    anchors = rng.uniform(-5, 5, (8, 3))
    p = np.array([0.5, -0.5, 0.2])
    prs = exact(anchors, p)
    prs.toas[3] += 0.5 / C
    fix = trilaterate(prs)
    assert fix.dropped_ids == [3]
    assert np.linalg.norm(fix.position - p) < 1e-6
    raw = trilaterate(prs, reject_outliers=False)
    assert raw.dropped_ids == [] and np.linalg.norm(raw.position - p) > 1e-3


def test_2d_holds_height():
    rng = np.random.default_rng(8)
    anchors = np.column_stack([rng.uniform(0, 9, 6), rng.uniform(0, 3, 6), rng.uniform(1, 2, 6)])
    p = np.array([4.0, 1.5, 1.2])
    fix = trilaterate(exact(anchors, p), dims=2, z_fixed=1.2)
    assert fix.position[2] == 1.2
    assert np.linalg.norm(fix.position - p) < 1e-6


@pytest.mark.parametrize("dims", [2, 3])
def test_linear_init_exact_on_clean_data(dims):
    from ultrapos.locator import linear_init
    rng = np.random.default_rng(21)
    anchors = rng.uniform(-5, 5, (7, 3))
    p = np.array([0.7, -1.3, 1.2])
    got = linear_init(exact(anchors, p, beta=0.8), dims, 1.2)
    assert np.allclose(got, p[:dims], atol=1e-8)
    assert linear_init(exact(anchors[:3], p), 3, 1.2) is None


def test_exactly_determined_remainder_not_trusted():
    # five anchors in 3D: dropping one leaves a set that fits anything
    rng = np.random.default_rng(849)
    for _ in range(50):
        prs, p = well_conditioned(rng, 3)
        if len(prs) == 5:
            break
    fix = trilaterate(prs)
    assert fix.dropped_ids == []
    assert np.linalg.norm(fix.position - p) < 1e-6
