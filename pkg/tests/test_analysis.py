import io
import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from idface.analysis import (
    CostModel,
    IsometryRow,
    KiB,
    MiB,
    codebook_log_size,
    comm_cost,
    epsilon_theoretical,
    isometry_mc,
    isometry_report,
    multi_identify_bits,
    optimal_alpha,
    order_stat_check,
    p_theta,
    paper_mb,
    rows_to_csv,
    storage_bytes,
    theta_grid,
    threshold_c,
    to_unit,
    twopc_bits,
    two_thirds_alpha,
)
from idface.ahe import BackendDescriptor
from idface.errors import InvalidAngle, QuadratureFailure
from idface.transform import sample_pairs_exact_angle, ternarize


def p_theta_1d(d, alpha, theta):
    # integrate V out analytically, leaving one quad over U
    c = threshold_c(d, alpha)
    cos = math.cos(theta)
    s = math.tan(theta)
    a = integrate.quad(lambda u: norm.pdf(u) * norm.sf((c / cos - u) / s), c, np.inf, epsabs=1e-12)[0]
    b = integrate.quad(lambda u: norm.pdf(u) * norm.cdf((-c / cos - u) / s), c, np.inf, epsabs=1e-12)[0]
    return a - b


def test_threshold_c():
    assert threshold_c(512, 256) == pytest.approx(norm.ppf(0.75))
    assert threshold_c(512, 341) == pytest.approx(norm.ppf(1 - 341 / 1024))
    for bad in (0, 512, 600):
        with pytest.raises(ValueError):
            threshold_c(512, bad)


@pytest.mark.parametrize("theta", [0.2, 0.7, 1.2, 1.5])
def test_p_theta_against_single_integral(theta):
    assert p_theta(512, 341, theta) == pytest.approx(p_theta_1d(512, 341, theta), abs=1e-6)


def test_p_theta_odd_symmetry():
    for theta in (0.3, 0.9, 1.4):
        assert p_theta(512, 341, math.pi - theta) == pytest.approx(-p_theta(512, 341, theta), abs=1e-4)


def test_epsilon_near_orthogonal_matches_monte_carlo():
    theta = math.acos(0.05)
    eps = epsilon_theoretical(512, 341, theta)
    assert eps < 0.06
    X, W = sample_pairs_exact_angle(512, theta, 10_000, np.random.default_rng(0))
    est = np.einsum("ij,ij->i", ternarize(X, 341).astype(int), ternarize(W, 341).astype(int)) / 341
    assert abs(abs(est.mean() - 0.05) - eps) < 0.01


def test_theta_grid():
    g = theta_grid(101)
    assert len(g) == 101 and g[0] > 0 and g[-1] < math.pi
    assert not np.any(np.isclose(g, math.pi / 2, atol=1e-6))
    assert np.all(np.diff(g) > 0)


def test_bad_angles_and_tolerance():
    for bad in (0.0, math.pi, -1.0, math.pi / 2):
        with pytest.raises(InvalidAngle):
            p_theta(512, 341, bad)
    with pytest.raises(QuadratureFailure):
        p_theta(512, 341, 1.0, atol=1e-30)


def test_isometry_mc_small_angle():
    mean, mx = isometry_mc(512, 341, 341, 0.01, 500, 1)
    assert mean < 0.02 and mx >= mean
    with pytest.raises(ValueError):
        isometry_mc(512, 341, 341, 1.0, 0)


def test_isometry_max_shrinks_with_d():
    _, mx512 = isometry_mc(512, 341, 341, 1.0, 300, 2)
    _, mx2048 = isometry_mc(2048, 1365, 1365, 1.0, 300, 2)
    assert mx2048 < mx512


def test_isometry_report_rows():
    rows = isometry_report(128, 85, 85, [0.5, 2.0], 50, rng=0)
    assert [type(r) for r in rows] == [IsometryRow, IsometryRow]
    assert rows[1].cos_theta == pytest.approx(math.cos(2.0))
    assert math.isfinite(rows[0].epsilon_theory)
    assert math.isnan(isometry_report(128, 85, 40, [0.5], 50, rng=0)[0].epsilon_theory)


def test_codebook_d3():
    sizes = [round(math.exp(codebook_log_size(3, a))) for a in (1, 2, 3)]
    assert sizes == [6, 12, 8]
    assert optimal_alpha(3) == 2
    with pytest.raises(ValueError):
        codebook_log_size(3, 0)
    with pytest.raises(ValueError):
        codebook_log_size(3, 4)


def test_codebook_d512_tie():
    assert optimal_alpha(512) == 341 == two_thirds_alpha(512)
    assert codebook_log_size(512, 342) == pytest.approx(codebook_log_size(512, 341), abs=1e-9)
    assert codebook_log_size(512, 340) < codebook_log_size(512, 341)
    assert codebook_log_size(512, 343) < codebook_log_size(512, 342)


def test_optimal_alpha_matches_scan():
    for d in range(1, 400):
        # exact integers, not logs, so ties are decided exactly
        f = [math.comb(d, a) << a for a in range(1, d + 1)]
        assert optimal_alpha(d) == 1 + f.index(max(f))
        if d % 3 != 1:
            assert optimal_alpha(d) == max(1, two_thirds_alpha(d))


def test_order_stat_d512():
    r = order_stat_check(512, 341, 4000, rng=3)
    assert r.deviation < 0.01
    assert r.theoretical == pytest.approx(threshold_c(512, 341))


def test_order_stat_median():
    r = order_stat_check(512, 256, 4000, rng=3)
    assert r.theoretical == pytest.approx(0.6744897501960818)
    assert abs(r.empirical - 0.6745) < 0.005


def test_order_stat_shrinks_with_d():
    small = order_stat_check(64, 42, 4000, rng=4)
    large = order_stat_check(1024, 682, 4000, rng=4)
    assert large.deviation < small.deviation
    with pytest.raises(ValueError):
        order_stat_check(64, 42, 99)


def test_comm_costs():
    desc = BackendDescriptor(slot_count=1, slot_bits=2047, ciphertext_bytes=512)
    m = CostModel(D=10**6, d=512, alpha=341, beta=63, descriptor=desc, parties=4)
    assert comm_cost(m, "twopc") == (2 * 10**6 * 63 + 1024) / 8
    assert comm_cost(m, "multi") == 3 * comm_cost(m, "twopc")
    assert multi_identify_bits(100, 63, 512, 4) == 3 * twopc_bits(100, 63, 512)
    one = CostModel(D=m.m, d=512, alpha=341, beta=63, descriptor=desc)
    assert comm_cost(one, "idface") == 2 * 512 + math.ceil(math.log2(m.m)) / 8
    with pytest.raises(ValueError):
        comm_cost(m, "yao")
    with pytest.raises(ValueError):
        CostModel(D=0, d=512, alpha=341, beta=63, descriptor=desc)


def test_storage_bytes():
    desc = BackendDescriptor(slot_count=1, slot_bits=2047, ciphertext_bytes=512)
    assert storage_bytes(10_000, 512, 341, 63, desc) == 15_728_640


def test_units_and_csv():
    assert to_unit(3 * MiB, MiB) == 3
    assert paper_mb(1000 * KiB) == 1
    rows = [IsometryRow(1.0, 0.5, 0.1, 0.2, 0.3, 10)]
    fh = io.StringIO()
    text = rows_to_csv(rows, fh)
    assert fh.getvalue() == text
    assert text.splitlines()[0] == "theta,cos_theta,epsilon_theory,mean_abs_delta,max_abs_delta,trials"
    assert rows_to_csv([{"a": 1}]) == "a\n1\n"
    assert rows_to_csv([]) == ""
