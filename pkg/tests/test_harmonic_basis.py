import numpy as np
import pytest

from src.core.exceptions import DegenerateElementException, QuadratureException
from src.services.harmonic_basis import harmonic_coefficients, laplacian_coefficients
from src.services.local_operator import choose_k


def _star_polygon(rng, n):
    """原点まわりの半径をゆらした星形多角形"""
    base = 2.0 * np.pi * np.arange(n) / n
    angles = base + rng.uniform(-0.15, 0.15, size=n) * (2.0 * np.pi / n)
    radii = rng.uniform(0.8, 1.2, size=n)
    return np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])


# 中心対称でない凸五角形
PENTAGON = [[0.0, 0.0], [1.3, 0.1], [1.6, 0.9], [0.7, 1.5], [-0.2, 0.8]]


def _green_moment(basis_service, geom, a, b):
    """∫_E x^a y^b dA = ∮ x^{a+1} y^b / (a+1) n_x ds"""
    coords = geom.vertex_coords
    nxt = np.roll(coords, -1, axis=0)
    total = 0.0
    for j in range(geom.n_edges):
        rule = basis_service.edge_gauss((coords[j], nxt[j]), 6)
        x, y = rule.points[:, 0], rule.points[:, 1]
        total += geom.outward_normals[j][0] * (rule.weights @ (x ** (a + 1) * y ** b)) / (a + 1)
    return total


class TestCoefficients:
    def test_degree_one_members(self):
        c = harmonic_coefficients(1)
        assert c.shape == (2, 2, 2)
        assert c[0, 1, 0] == 1.0 and c[1, 0, 1] == 1.0

    def test_degree_two_members(self):
        c = harmonic_coefficients(2)
        # Re w² = m_x² − m_y²,  Im w² = 2 m_x m_y
        assert c[2, 2, 0] == 1.0 and c[2, 0, 2] == -1.0
        assert c[3, 1, 1] == 2.0
        assert np.count_nonzero(c[3]) == 1

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    def test_members_are_harmonic(self, k):
        coefficients = harmonic_coefficients(k)
        assert coefficients.shape[0] == 2 * k
        np.testing.assert_allclose(laplacian_coefficients(coefficients), 0.0, atol=1e-14)


class TestEdgeGauss:
    def test_single_point_is_midpoint(self, basis_service):
        rule = basis_service.edge_gauss(([0.0, 0.0], [2.0, 0.0]), 1)
        np.testing.assert_allclose(rule.points, [[1.0, 0.0]])
        np.testing.assert_allclose(rule.weights, [2.0])
        assert rule.order == 1

    def test_exact_for_cubic(self, basis_service):
        rule = basis_service.edge_gauss(([0.0, 0.0], [1.0, 0.0]), 2)
        s = rule.points[:, 0]
        assert rule.weights @ s ** 2 == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert rule.weights @ s ** 3 == pytest.approx(0.25, abs=1e-15)

    def test_weights_sum_to_length(self, basis_service):
        rule = basis_service.edge_gauss(([1.0, 2.0], [4.0, 6.0]), 5)
        assert rule.weights.sum() == pytest.approx(5.0)

    def test_invalid_point_count(self, basis_service):
        with pytest.raises(QuadratureException):
            basis_service.edge_gauss(([0.0, 0.0], [1.0, 0.0]), 0)


class TestPolygonQuadrature:
    def test_monomials_on_unit_square(self, basis_service, unit_square):
        rule = basis_service.polygon_quadrature(unit_square, 6)
        x, y = rule.points[:, 0], rule.points[:, 1]
        for a in range(7):
            for b in range(7 - a):
                exact = 1.0 / ((a + 1) * (b + 1))
                assert rule.weights @ (x ** a * y ** b) == pytest.approx(exact, abs=1e-13)

    def test_nonconvex_cells(self, mesh_service, mesh_generator, basis_service):
        mesh = mesh_generator.generate_convex_concave(4, 0.2)
        for geom in mesh_service.element_geometries(mesh):
            rule = basis_service.polygon_quadrature(geom, 4)
            assert rule.weights.sum() == pytest.approx(geom.area, rel=1e-13)
            first_moment = rule.weights @ rule.points
            np.testing.assert_allclose(first_moment, geom.area * geom.centroid, atol=1e-14)

    @pytest.mark.parametrize("degree", range(8))
    def test_odd_and_even_degrees_on_pentagon(self, mesh_service, basis_service, degree):
        geom = mesh_service.geometry_from_coords(np.array(PENTAGON))
        rule = basis_service.polygon_quadrature(geom, degree)
        x, y = rule.points[:, 0], rule.points[:, 1]
        for a in range(degree + 1):
            b = degree - a
            assert rule.weights @ (x ** a * y ** b) == pytest.approx(_green_moment(basis_service, geom, a, b), rel=1e-12)

    def test_fan_point_prefers_centroid(self, basis_service, unit_square):
        np.testing.assert_allclose(basis_service.fan_point(unit_square), unit_square.centroid)


class TestGram:
    def test_unit_square_degree_one(self, basis_service, unit_square):
        basis = basis_service.harmonic_basis(unit_square, 1)
        G = basis_service.gram_matrix_boundary(basis)
        # ∇m_x = e_x / h, h = √2
        np.testing.assert_allclose(G, 0.5 * np.eye(2), atol=1e-14)

    def test_boundary_matches_area_on_random_quads(self, basis_service, random_quads):
        for geom in random_quads:
            basis = basis_service.harmonic_basis(geom, choose_k(geom.n_edges))
            boundary = basis_service.gram_matrix_boundary(basis)
            area = basis_service.gram_matrix_area(basis)
            assert np.abs(boundary - area).max() <= 1e-11 * np.abs(area).max()
            np.testing.assert_array_equal(boundary, boundary.T)

    @pytest.mark.parametrize("n", [3, 5, 6, 7, 8])
    def test_boundary_matches_area_on_polygons(self, mesh_service, basis_service, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(10):
            geom = mesh_service.geometry_from_coords(_star_polygon(rng, n))
            basis = basis_service.harmonic_basis(geom, choose_k(n))
            boundary = basis_service.gram_matrix_boundary(basis)
            area = basis_service.gram_matrix_area(basis)
            assert np.abs(boundary - area).max() <= 1e-11 * np.abs(area).max()

    def test_translation_invariance(self, mesh_service, basis_service):
        geom = mesh_service.geometry_from_coords(np.array([[0.0, 0.0], [1.1, 0.1], [0.9, 1.2], [-0.1, 0.8]]))
        shifted = mesh_service.geometry_from_coords(geom.vertex_coords + np.array([5.0, -3.0]))
        G = basis_service.gram_matrix_boundary(basis_service.harmonic_basis(geom, 2))
        G_shifted = basis_service.gram_matrix_boundary(basis_service.harmonic_basis(shifted, 2))
        np.testing.assert_allclose(G_shifted, G, atol=1e-12)

    def test_condition_limit(self, basis_service, unit_square):
        basis_service.condition_limit = 1.5
        with pytest.raises(DegenerateElementException) as excinfo:
            basis_service.gram_matrix_boundary(basis_service.harmonic_basis(unit_square, 2))
        assert excinfo.value.condition == pytest.approx(3.0)


class TestMemberIntegrals:
    def test_centered_members_vanish_on_square(self, basis_service, unit_square):
        basis = basis_service.harmonic_basis(unit_square, 2)
        integrals = basis_service.member_integrals(basis)
        np.testing.assert_allclose(integrals, 0.0, atol=1e-15)

    def test_matches_high_order_quadrature(self, mesh_service, basis_service):
        rhombus = mesh_service.geometry_from_coords(np.array([[0.0, 0.0], [2.0, 0.0], [3.0, 1.0], [1.0, 1.0]]))
        basis = basis_service.harmonic_basis(rhombus, 3)
        rule = basis_service.polygon_quadrature(rhombus, 12)
        reference = basis_service.evaluate(basis, rule.points) @ rule.weights
        for member in range(basis.size):
            value = basis_service.integrate_harmonic_over_element(basis, member)
            assert value == pytest.approx(reference[member], abs=1e-13)

    @pytest.mark.parametrize("k", [3, 5])
    def test_odd_degree_members_on_pentagon(self, mesh_service, basis_service, k):
        geom = mesh_service.geometry_from_coords(np.array(PENTAGON))
        basis = basis_service.harmonic_basis(geom, k)
        rule = basis_service.polygon_quadrature(geom, 12)
        reference = basis_service.evaluate(basis, rule.points) @ rule.weights
        np.testing.assert_allclose(basis_service.member_integrals(basis), reference, rtol=0.0, atol=1e-13)

    def test_member_out_of_range(self, basis_service, unit_square):
        basis = basis_service.harmonic_basis(unit_square, 1)
        with pytest.raises(IndexError):
            basis_service.integrate_harmonic_over_element(basis, 2)
