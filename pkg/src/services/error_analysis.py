import logging
from typing import List, Optional, Tuple

import numpy as np

from ..core.config import settings
from ..models.data_models import (
    ErrorReport,
    ManufacturedCase,
    Method,
    PolygonalMesh,
    SaddlePointSystem,
    SolutionFields,
)
from .local_operator import LocalOperatorService

logger = logging.getLogger(__name__)


class ErrorAnalyzer:
    """u・発散・流束・法線流束の4つの相対誤差を計算するサービス"""

    def __init__(self, local_operator: Optional[LocalOperatorService] = None):
        self.local_operator = local_operator or LocalOperatorService()
        self.mesh_service = self.local_operator.mesh_service
        self.basis_service = self.local_operator.basis_service
        self.exactness = settings.quadrature_exactness
        self.edge_points = settings.error_edge_points
        self.norm_floor = settings.norm_floor

    def _relative(self, squares: Tuple[float, float], name: str, absolute: Optional[List[str]] = None) -> float:
        """ノルムが下限未満なら絶対誤差を返す"""
        error = float(np.sqrt(max(squares[0], 0.0)))
        norm = float(np.sqrt(max(squares[1], 0.0)))
        if norm < self.norm_floor:
            logger.warning(f"{name}: 正規化ノルムが {norm:.3e} のため絶対誤差で報告します")
            if absolute is not None:
                absolute.append(name)
            return error
        return error / norm

    def _u_squares(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> Tuple[float, float]:
        error, norm = 0.0, 0.0
        for c in range(mesh.n_cells):
            geom = self.mesh_service.element_geometry(mesh, c)
            rule = self.basis_service.polygon_quadrature(geom, self.exactness)
            exact = case.u(rule.points[:, 0], rule.points[:, 1])
            error += float(np.dot(rule.weights, (exact - solution.u_cells[c]) ** 2))
            norm += float(np.dot(rule.weights, exact ** 2))
        return error, norm

    def _div_squares(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> Tuple[float, float]:
        error, norm = 0.0, 0.0
        for c, entries in enumerate(mesh.cell_edges):
            geom = self.mesh_service.element_geometry(mesh, c)
            div_h = sum(mesh.edge_lengths[e] * s * solution.sigma_dofs[e] for e, s in entries) / geom.area
            rule = self.basis_service.polygon_quadrature(geom, self.exactness)
            f = np.broadcast_to(case.f(rule.points[:, 0], rule.points[:, 1]), rule.weights.shape)
            # div σ = −f
            error += float(np.dot(rule.weights, (div_h + f) ** 2))
            norm += float(np.dot(rule.weights, f ** 2))
        return error, norm

    def _sigma_squares(
        self,
        mesh: PolygonalMesh,
        system: SaddlePointSystem,
        solution: SolutionFields,
        case: ManufacturedCase,
        method: Method
    ) -> Tuple[float, float]:
        error, norm = 0.0, 0.0
        for c in range(mesh.n_cells):
            geom = self.mesh_service.element_geometry(mesh, c)
            dof_map = self.local_operator.local_dof_map(mesh, c)
            local = dof_map.signs * solution.sigma_dofs[dof_map.edges]
            pack = system.projections[c]
            rule = self.basis_service.polygon_quadrature(geom, self.exactness)

            if method == "stabfree":
                basis = self.basis_service.harmonic_basis(geom, pack.k)
                q = self.local_operator.projected_coefficients(pack, local)
                gx, gy = self.basis_service.gradient(basis, rule.points)
                px, py = q @ gx, q @ gy
            else:
                px, py = pack.P0 @ local

            sx, sy = case.sigma(rule.points[:, 0], rule.points[:, 1])
            sx = np.broadcast_to(sx, rule.weights.shape)
            sy = np.broadcast_to(sy, rule.weights.shape)
            error += float(np.dot(rule.weights, (sx - px) ** 2 + (sy - py) ** 2))
            norm += float(np.dot(rule.weights, sx ** 2 + sy ** 2))
        return error, norm

    def _sigma_n_squares(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> Tuple[float, float]:
        error, norm = 0.0, 0.0
        for e, (a, b) in enumerate(mesh.edges):
            rule = self.basis_service.edge_gauss((mesh.vertices[a], mesh.vertices[b]), self.edge_points)
            sx, sy = case.sigma(rule.points[:, 0], rule.points[:, 1])
            normal = mesh.edge_normals[e]
            flux = np.broadcast_to(sx, rule.weights.shape) * normal[0] \
                + np.broadcast_to(sy, rule.weights.shape) * normal[1]
            weight = mesh.edge_lengths[e]
            error += weight * float(np.dot(rule.weights, (flux - solution.sigma_dofs[e]) ** 2))
            norm += weight * float(np.dot(rule.weights, flux ** 2))
        return error, norm

    def err_u(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> float:
        return self._relative(self._u_squares(mesh, solution, case), "err_u")

    def err_div(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> float:
        return self._relative(self._div_squares(mesh, solution, case), "err_div")

    def err_sigma(
        self,
        mesh: PolygonalMesh,
        system: SaddlePointSystem,
        solution: SolutionFields,
        case: ManufacturedCase,
        method: Optional[Method] = None
    ) -> float:
        """Π̂σ_h（安定化なし）または Π⁰σ_h（D-recipe）との相対誤差"""
        method = method or system.method
        return self._relative(self._sigma_squares(mesh, system, solution, case, method), "err_sigma")

    def err_sigma_n(self, mesh: PolygonalMesh, solution: SolutionFields, case: ManufacturedCase) -> float:
        """辺重み h_e = |e| の法線フラックス誤差"""
        return self._relative(self._sigma_n_squares(mesh, solution, case), "err_sigma_n")

    def error_report(
        self,
        mesh: PolygonalMesh,
        system: SaddlePointSystem,
        solution: SolutionFields,
        case: ManufacturedCase,
        method: Optional[Method] = None
    ) -> ErrorReport:
        """4つの誤差をまとめて計算"""
        method = method or system.method
        absolute: List[str] = []
        values = {
            "err_u": self._relative(self._u_squares(mesh, solution, case), "err_u", absolute),
            "err_div": self._relative(self._div_squares(mesh, solution, case), "err_div", absolute),
            "err_sigma": self._relative(
                self._sigma_squares(mesh, system, solution, case, method), "err_sigma", absolute
            ),
            "err_sigma_n": self._relative(self._sigma_n_squares(mesh, solution, case), "err_sigma_n", absolute),
        }
        report = ErrorReport(
            **values,
            h=mesh.h,
            n_dof=system.numbering.total,
            method=method,
            absolute_errors=absolute,
        )
        logger.info(
            f"誤差: h={report.h:.4e} err_u={report.err_u:.3e} err_div={report.err_div:.3e} "
            f"err_sigma={report.err_sigma:.3e} err_sigma_n={report.err_sigma_n:.3e}"
        )
        return report
