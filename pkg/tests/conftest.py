from typing import List

import numpy as np
import pytest

from src.models.data_models import ElementGeometry
from src.services.convergence_engine import ConvergenceEngine
from src.services.diagnostics_service import DiagnosticsService
from src.services.error_analysis import ErrorAnalyzer
from src.services.harmonic_basis import HarmonicBasisService
from src.services.local_operator import LocalOperatorService
from src.services.mesh_generator import MeshGenerator
from src.services.mesh_service import MeshService
from src.services.saddle_point_solver import SaddlePointSolver

UNIT_SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


@pytest.fixture
def mesh_service() -> MeshService:
    return MeshService()


@pytest.fixture
def mesh_generator(mesh_service) -> MeshGenerator:
    return MeshGenerator(mesh_service)


@pytest.fixture
def basis_service(mesh_service) -> HarmonicBasisService:
    return HarmonicBasisService(mesh_service)


@pytest.fixture
def local_operator(mesh_service, basis_service) -> LocalOperatorService:
    return LocalOperatorService(mesh_service, basis_service)


@pytest.fixture
def solver(local_operator) -> SaddlePointSolver:
    return SaddlePointSolver(local_operator, serial=True)


@pytest.fixture
def analyzer(local_operator) -> ErrorAnalyzer:
    return ErrorAnalyzer(local_operator)


@pytest.fixture
def engine(mesh_generator, solver, analyzer) -> ConvergenceEngine:
    return ConvergenceEngine(mesh_generator, solver, analyzer)


@pytest.fixture
def diagnostics(mesh_generator, local_operator) -> DiagnosticsService:
    return DiagnosticsService(mesh_generator, local_operator)


@pytest.fixture
def unit_square(mesh_service) -> ElementGeometry:
    return mesh_service.geometry_from_coords(np.array(UNIT_SQUARE))


@pytest.fixture
def random_quads(mesh_generator, mesh_service) -> List[ElementGeometry]:
    """形状正則なランダム四角形 100 個（gamma_edge ≥ 0.2）"""
    rng = np.random.default_rng(20240611)
    quads = []
    for _ in range(100):
        mesh = mesh_generator.generate_random_quadrilateral(rng, min_gamma=0.2)
        quads.append(mesh_service.element_geometry(mesh, 0))
    return quads
