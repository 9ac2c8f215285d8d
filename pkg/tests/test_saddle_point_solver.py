import numpy as np
import pytest
import scipy.sparse as sp
from scipy.io import mmread

from src.core.exceptions import AccuracyWarning, SolverException, ValidationException
from src.services.manufactured_cases import get_case
from src.services.saddle_point_solver import SaddlePointSolver


def _zero(x, y):
    return np.zeros_like(x)


def _one(x, y):
    return np.ones_like(x)


def _fix_boundary(solver, mesh, system, field):
    fluxes = solver.interpolate_fluxes(mesh, field)
    return solver.apply_known_fluxes(system, {int(e): fluxes[e] for e in mesh.boundary_edges})


class TestAssembly:
    def test_system_sizes(self, solver, mesh_generator):
        single = solver.assemble(mesh_generator.generate_cartesian(1), "stabfree", _one)
        assert single.size == 5

        grid = solver.assemble(mesh_generator.generate_cartesian(2), "stabfree", _one)
        assert grid.size == 16
        assert grid.numbering.total == 16

    @pytest.mark.parametrize("method", ["stabfree", "drecipe"])
    def test_matrix_is_symmetric(self, solver, mesh_generator, method):
        system = solver.assemble(mesh_generator.generate_distorted(4, 0.1), method, _one)
        assert abs(system.matrix - system.matrix.T).max() == 0.0

    def test_divergence_block(self, solver, mesh_generator):
        mesh = mesh_generator.generate_cartesian(2)
        system = solver.assemble(mesh, "stabfree", _one)
        B = system.matrix[mesh.n_edges:, :mesh.n_edges].toarray()

        # 各セル行は |e| s_e、各内部辺は符号の異なる2つのセル行に現れる
        np.testing.assert_allclose(np.abs(B).sum(axis=1), np.full(4, 2.0))
        for e, adj in enumerate(mesh.edge_cells):
            if len(adj) == 2:
                assert B[:, e].sum() == pytest.approx(0.0)
        np.testing.assert_allclose(system.rhs[mesh.n_edges:], np.full(4, -0.25))

    def test_parallel_matches_serial(self, local_operator, mesh_generator):
        mesh = mesh_generator.generate_random_voronoi(32, lloyd_iters=5, rng_seed=4)
        serial = SaddlePointSolver(local_operator, serial=True).assemble(mesh, "stabfree", _one)
        parallel = SaddlePointSolver(local_operator, max_workers=4, serial=False).assemble(mesh, "stabfree", _one)

        np.testing.assert_array_equal(serial.matrix.toarray(), parallel.matrix.toarray())
        np.testing.assert_array_equal(serial.rhs, parallel.rhs)


class TestSolve:
    def test_zero_load_gives_zero_solution(self, solver, mesh_generator):
        system = solver.assemble(mesh_generator.generate_cartesian(4), "stabfree", _zero)
        solution = solver.solve(system)

        assert not solution.sigma_dofs.any()
        assert not solution.u_cells.any()
        assert solution.residual == 0.0

    @pytest.mark.parametrize("method", ["stabfree", "drecipe"])
    @pytest.mark.parametrize("family", ["cartesian", "distorted", "rhomboidal"])
    def test_constant_flux_patch_test(self, solver, mesh_service, mesh_generator, method, family):
        mesh = {
            "cartesian": lambda: mesh_generator.generate_cartesian(8),
            "distorted": lambda: mesh_generator.generate_distorted(8, 0.1),
            "rhomboidal": lambda: mesh_generator.generate_rhomboidal(8, 8, 0.5),
        }[family]()
        field = lambda x, y: (np.ones_like(x), np.zeros_like(x))

        system = _fix_boundary(solver, mesh, solver.assemble(mesh, method, _zero), field)
        assert system.floating_pressure
        solution = solver.solve(system)

        np.testing.assert_allclose(solution.sigma_dofs, solver.interpolate_fluxes(mesh, field), atol=1e-10)
        # u_h = x_E − ∫x
        centroids = np.array([g.centroid[0] for g in mesh_service.element_geometries(mesh)])
        np.testing.assert_allclose(solution.u_cells, centroids - 0.5, atol=1e-10)

    def test_discrete_divergence_equals_projected_load(self, solver, mesh_service, mesh_generator, local_operator):
        mesh = mesh_generator.generate_cartesian(8)
        case = get_case("bubble")
        system = solver.assemble(mesh, "stabfree", case.f)
        solution = solver.solve(system)

        divergence = solver.cell_divergence(mesh, solution.sigma_dofs, system.cell_areas)
        projected = np.array([
            local_operator.local_rhs(g, case.f) / g.area for g in mesh_service.element_geometries(mesh)
        ])
        np.testing.assert_allclose(divergence, -projected, atol=1e-10)

    def test_divergence_is_method_independent(self, solver, mesh_generator):
        mesh = mesh_generator.generate_distorted(8, 0.1)
        case = get_case("bubble")
        divergences = []
        for method in ("stabfree", "drecipe"):
            system = solver.assemble(mesh, method, case.f)
            solution = solver.solve(system)
            divergences.append(solver.cell_divergence(mesh, solution.sigma_dofs, system.cell_areas))
        np.testing.assert_allclose(divergences[0], divergences[1], atol=1e-10)

    def test_natural_boundary_solve_is_accurate(self, solver, mesh_generator):
        mesh = mesh_generator.generate_cartesian(4)
        system = solver.assemble(mesh, "stabfree", get_case("bubble").f)
        solution = solver.solve(system)

        assert solution.accurate
        assert solution.residual <= 1e-10

    def test_singular_matrix(self, solver, mesh_generator):
        system = solver.assemble(mesh_generator.generate_cartesian(1), "stabfree", _one)
        broken = system.model_copy(update={"matrix": sp.csr_matrix((system.size, system.size))})
        with pytest.raises(SolverException) as excinfo:
            solver.solve(broken)
        assert excinfo.value.diagnostics["size"] == system.size

    def test_accuracy_warning(self, solver, mesh_generator):
        system = solver.assemble(mesh_generator.generate_cartesian(2), "stabfree", _one)
        solver.tolerance = -1.0
        with pytest.warns(AccuracyWarning):
            solution = solver.solve(system)
        assert not solution.accurate


class TestKnownFluxes:
    def test_empty_mapping_is_identity(self, solver, mesh_generator):
        system = solver.assemble(mesh_generator.generate_cartesian(2), "stabfree", _one)
        assert solver.apply_known_fluxes(system, {}) is system

    def test_unknown_edge(self, solver, mesh_generator):
        system = solver.assemble(mesh_generator.generate_cartesian(2), "stabfree", _one)
        with pytest.raises(ValidationException):
            solver.apply_known_fluxes(system, {99: 1.0})

    def test_all_boundary_fixed_on_single_cell(self, solver, mesh_generator):
        mesh = mesh_generator.generate_cartesian(1)
        system = solver.assemble(mesh, "stabfree", _zero)
        reduced = _fix_boundary(solver, mesh, system, lambda x, y: (np.zeros_like(x), np.zeros_like(x)))

        assert reduced.size == 1
        assert reduced.floating_pressure
        solution = solver.solve(reduced)
        assert solution.u_cells.tolist() == [0.0]

    def test_partial_fixing_keeps_pressure_determined(self, solver, mesh_generator):
        mesh = mesh_generator.generate_cartesian(4)
        system = solver.assemble(mesh, "stabfree", _one)
        first = int(mesh.boundary_edges[0])
        reduced = solver.apply_known_fluxes(system, {first: 0.0})

        assert reduced.size == system.size - 1
        assert not reduced.floating_pressure
        assert reduced.fixed_edges.tolist() == [first]


def test_dump_matrix_market(solver, mesh_generator, tmp_path):
    system = solver.assemble(mesh_generator.generate_cartesian(2), "drecipe", _one)
    path = solver.dump_matrix_market(system, str(tmp_path / "system"))

    assert path.suffix == ".mtx"
    loaded = sp.csr_matrix(mmread(str(path)))
    assert loaded.shape == (16, 16)
    np.testing.assert_allclose(loaded.toarray(), system.matrix.toarray())
