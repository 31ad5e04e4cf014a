import math

import numpy as np
import pytest

from kfpkit.quadrature import (
    QuadratureError,
    adaptive_legendre,
    gaussian_integral,
    graded_mesh,
    rule,
)


class TestRule:
    def test_legendre_one(self):
        r = rule("legendre", 1)
        assert r.nodes.tolist() == [0.0] and r.weights.tolist() == [2.0]

    def test_legendre_exactness(self):
        r = rule("legendre", 3)
        assert np.dot(r.weights, r.nodes**4) == pytest.approx(0.4, abs=1e-14)

    def test_hermite_two(self):
        r = rule("hermite", 2)
        assert np.allclose(r.nodes, [-1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)
        assert np.allclose(r.weights, math.sqrt(math.pi) / 2, atol=1e-15)

    @pytest.mark.parametrize("kind,total", [("legendre", 2.0), ("hermite", math.sqrt(math.pi))])
    def test_invariants(self, kind, total):
        for n in (1, 5, 20):
            r = rule(kind, n)
            assert np.all(r.weights > 0)
            assert r.weights.sum() == pytest.approx(total, abs=1e-13)
            assert np.max(np.abs(r.nodes + r.nodes[::-1])) <= 1e-14
        assert np.all(np.abs(rule("legendre", 9).nodes) < 1)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            rule("legendre", 0)

    def test_read_only(self):
        with pytest.raises(ValueError):
            rule("legendre", 4).nodes[0] = 1.0


class TestGaussian:
    mean = np.array([0.3, -1.0])
    cov = np.array([[1.0, 0.4], [0.4, 0.5]])

    def test_constant(self):
        assert gaussian_integral(lambda y: np.ones(len(y)), self.mean, self.cov) == pytest.approx(1, abs=1e-13)

    def test_first_moment(self):
        for i in range(2):
            v = gaussian_integral(lambda y: y[:, i], self.mean, self.cov, order=1)
            assert v == pytest.approx(self.mean[i], abs=1e-14)

    def test_second_moment(self):
        for i in range(2):
            for j in range(2):
                v = gaussian_integral(lambda y: y[:, i] * y[:, j], self.mean, self.cov, order=3)
                assert v == pytest.approx(self.mean[i] * self.mean[j] + self.cov[i, j], abs=1e-12)

    def test_rotation_invariance(self):
        th = 0.7
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        f = lambda y: 1.0 + y[:, 0] ** 2 - 3 * y[:, 0] * y[:, 1] + 0.5 * y[:, 1]
        a = gaussian_integral(f, np.zeros(2), self.cov, order=4)
        b = gaussian_integral(lambda z: f(z @ R), np.zeros(2), R @ self.cov @ R.T, order=4)
        assert a == pytest.approx(b, abs=1e-12)

    def test_disagreement_flagged(self):
        with pytest.raises(QuadratureError):
            gaussian_integral(lambda y: np.abs(y[:, 0]) ** 0.5, np.zeros(1), np.eye(1), order=2, tol=1e-12)


class TestGradedMesh:
    def test_uniform(self):
        assert np.allclose(graded_mesh(0, 1, 4, 1).breakpoints, [0, 0.25, 0.5, 0.75, 1])

    def test_grade_two(self):
        br = graded_mesh(0, 1, 4, 2).breakpoints
        assert np.allclose(1 - br, [1, 9 / 16, 1 / 4, 1 / 16, 0], atol=1e-15)

    def test_singular_integral(self):
        s, w = graded_mesh(0, 1, 64, 4).nodes(4)
        assert np.dot(w, (1 - s) ** -0.5) == pytest.approx(2.0, abs=1e-6)

    def test_alpha_grading(self):
        # (t - s)^(alpha/2 - 1) with grade 2/alpha becomes constant in the graded variable
        alpha = 0.4
        g, w = graded_mesh(0, 2, 8, 2 / alpha).gap_nodes(4)
        exact = 2 ** (alpha / 2) / (alpha / 2)
        assert np.dot(w, g ** (alpha / 2 - 1)) == pytest.approx(exact, rel=1e-12)

    def test_extra_breaks(self):
        s, w = graded_mesh(0, 1, 4, 3).nodes(4, [0.37])
        val = np.dot(w, np.where(s < 0.37, 1.0, 5.0))
        assert val == pytest.approx(0.37 + 5 * 0.63, abs=1e-13)

    def test_errors(self):
        with pytest.raises(ValueError):
            graded_mesh(1, 1, 4)
        with pytest.raises(ValueError):
            graded_mesh(0, 1, 0)
        with pytest.raises(ValueError):
            graded_mesh(0, 1, 4, 0.5)


class TestAdaptive:
    def test_smooth(self):
        assert adaptive_legendre(np.exp, 0.0, 1.0) == pytest.approx(math.e - 1, rel=1e-13)

    def test_kink(self):
        assert adaptive_legendre(lambda x: abs(x - 0.3), 0.0, 1.0) == pytest.approx(0.045 + 0.245, rel=1e-11)

    def test_matrix_valued(self):
        val = adaptive_legendre(lambda u: np.array([[u, u**2], [1.0, 0.0]]), 0.0, 2.0)
        assert np.allclose(val, [[2.0, 8 / 3], [2.0, 0.0]], atol=1e-13)

    def test_failure(self):
        with pytest.raises(QuadratureError):
            adaptive_legendre(lambda x: np.sign(x - 1 / 3) * (1 + 1e3 * np.sin(1e4 * x)), 0.0, 1.0,
                              max_depth=3)
