import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.linalg import splu

from ..core.config import settings
from ..core.exceptions import AccuracyWarning, SolverException, ValidationException
from ..models.data_models import (
    GlobalNumbering,
    LocalSystem,
    Method,
    PolygonalMesh,
    SaddlePointSystem,
    SolutionFields,
)
from .local_operator import LocalOperatorService, ScalarField, VectorField

logger = logging.getLogger(__name__)


class SaddlePointSolver:
    """鞍点系 [A Bᵀ; B 0] の組み立てと直接法による求解"""

    def __init__(
        self,
        local_operator: Optional[LocalOperatorService] = None,
        max_workers: Optional[int] = None,
        serial: Optional[bool] = None
    ):
        self.local_operator = local_operator or LocalOperatorService()
        self.max_workers = max_workers or settings.max_workers
        self.serial = settings.serial if serial is None else serial
        self.tolerance = settings.solver_tolerance

    def _local_systems(self, mesh: PolygonalMesh, method: Method, f: ScalarField) -> List[LocalSystem]:
        """要素計算（並列時もセル番号順に返す）"""
        def compute(cell: int) -> LocalSystem:
            return self.local_operator.local_system(mesh, cell, method, f)

        cells = range(mesh.n_cells)
        if self.serial or self.max_workers == 1 or mesh.n_cells < 2:
            return [compute(c) for c in cells]
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(compute, cells))

    def assemble(self, mesh: PolygonalMesh, method: Method, f: ScalarField) -> SaddlePointSystem:
        """全要素の寄与を向き符号つきで散布（セル番号の昇順）"""
        numbering = GlobalNumbering(n_edges=mesh.n_edges, n_cells=mesh.n_cells)
        locals_ = self._local_systems(mesh, method, f)

        rows, cols, vals = [], [], []
        rhs = np.zeros(numbering.total)
        areas = np.empty(mesh.n_cells)
        for local in locals_:
            edges = local.dof_map.edges
            signs = local.dof_map.signs
            block = signs[:, None] * local.A * signs[None, :]
            rows.append(np.repeat(edges, edges.size))
            cols.append(np.tile(edges, edges.size))
            vals.append(block.ravel())

            row = numbering.n_edges + local.dof_map.cell
            coupling = local.divrow * signs
            rows.extend([np.full(edges.size, row), edges])
            cols.extend([edges, np.full(edges.size, row)])
            vals.extend([coupling, coupling])

            rhs[row] = local.rhs
            areas[local.dof_map.cell] = local.area

        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(numbering.total, numbering.total),
        ).tocsr()

        system = SaddlePointSystem(
            matrix=matrix,
            rhs=rhs,
            numbering=numbering,
            method=method,
            free_edges=np.arange(mesh.n_edges),
            fixed_edges=np.array([], dtype=int),
            fixed_values=np.array([], dtype=float),
            boundary_edges=mesh.boundary_edges,
            cell_areas=areas,
            projections=tuple(local.pack for local in locals_),
        )
        logger.info(f"鞍点系を組み立てました: method={method}, 未知数={system.size}, nnz={system.nnz}")
        return system

    def apply_known_fluxes(self, system: SaddlePointSystem, edge_values: Mapping[int, float]) -> SaddlePointSystem:
        """指定辺のフラックスを既知として対称に消去"""
        if not edge_values:
            return system

        position = {int(e): i for i, e in enumerate(system.free_edges)}
        fixed_edges = np.array(sorted(int(e) for e in edge_values), dtype=int)
        unknown = [e for e in fixed_edges if e not in position]
        if unknown:
            raise ValidationException(f"固定できない辺番号です（範囲外または固定済み）: {unknown}")
        values = np.array([float(edge_values[e]) for e in fixed_edges])

        fixed_positions = np.array([position[e] for e in fixed_edges], dtype=int)
        mask = np.ones(system.size, dtype=bool)
        mask[fixed_positions] = False
        keep = np.flatnonzero(mask)

        matrix = system.matrix.tocsc()
        coupling = matrix[keep][:, fixed_positions]
        rhs = system.rhs[keep] - coupling @ values
        reduced = matrix[keep][:, keep].tocsr()

        all_fixed = np.concatenate([system.fixed_edges, fixed_edges])
        all_values = np.concatenate([system.fixed_values, values])
        order = np.argsort(all_fixed, kind="stable")
        floating = bool(np.isin(system.boundary_edges, all_fixed).all())

        logger.info(f"既知フラックスを消去しました: {fixed_edges.size}辺, 残り未知数={reduced.shape[0]}")
        return system.model_copy(update={
            "matrix": reduced,
            "rhs": rhs,
            "free_edges": np.setdiff1d(system.free_edges, fixed_edges),
            "fixed_edges": all_fixed[order],
            "fixed_values": all_values[order],
            "floating_pressure": floating,
        })

    def _bordered(self, system: SaddlePointSystem):
        """圧力の定数不定性を面積重み平均ゼロ条件で除く"""
        n_free = system.free_edges.size
        constraint = np.zeros(system.size)
        constraint[n_free:] = system.cell_areas
        column = sp.csc_matrix(constraint[:, None])
        matrix = sp.bmat([[system.matrix, column], [column.T, None]], format="csc")
        return matrix, np.append(system.rhs, 0.0)

    def solve(self, system: SaddlePointSystem) -> SolutionFields:
        """疎直接分解で解き、相対残差を確認"""
        n_free = system.free_edges.size
        n_cells = system.numbering.n_cells
        if system.floating_pressure:
            matrix, rhs = self._bordered(system)
        else:
            matrix, rhs = system.matrix.tocsc(), system.rhs

        diagnostics = {"size": int(matrix.shape[0]), "nnz": int(matrix.nnz), "method": system.method}
        rhs_norm = float(np.linalg.norm(rhs))
        if rhs_norm == 0.0:
            x = np.zeros(matrix.shape[0])
            residual = 0.0
        else:
            try:
                factor = splu(matrix)
            except RuntimeError as e:
                logger.error(f"行列分解に失敗しました: {str(e)}")
                raise SolverException(f"行列が特異です: {str(e)}", diagnostics=diagnostics)
            x = factor.solve(rhs)
            residual = float(np.linalg.norm(matrix @ x - rhs)) / rhs_norm
            if not np.isfinite(residual):
                raise SolverException("解が有限値ではありません", diagnostics=diagnostics)

        accurate = residual <= self.tolerance
        if not accurate:
            message = f"相対残差 {residual:.3e} が許容値 {self.tolerance:.1e} を超えています"
            logger.warning(message)
            warnings.warn(message, AccuracyWarning)
        else:
            logger.info(f"求解しました: 相対残差={residual:.3e}")

        sigma = np.zeros(system.numbering.n_edges)
        sigma[system.free_edges] = x[:n_free]
        sigma[system.fixed_edges] = system.fixed_values
        return SolutionFields(
            sigma_dofs=sigma,
            u_cells=x[n_free:n_free + n_cells].copy(),
            residual=residual,
            accurate=accurate,
        )

    def interpolate_fluxes(self, mesh: PolygonalMesh, field: VectorField, n_points: int = 4) -> np.ndarray:
        """大域法線に対する辺平均フラックス g_e = (1/|e|) ∫_e σ·n_e"""
        basis_service = self.local_operator.basis_service
        fluxes = np.empty(mesh.n_edges)
        for e, (a, b) in enumerate(mesh.edges):
            rule = basis_service.edge_gauss((mesh.vertices[a], mesh.vertices[b]), n_points)
            sx, sy = field(rule.points[:, 0], rule.points[:, 1])
            normal = mesh.edge_normals[e]
            flux = np.broadcast_to(sx, rule.weights.shape) * normal[0] \
                + np.broadcast_to(sy, rule.weights.shape) * normal[1]
            fluxes[e] = np.dot(rule.weights, flux) / mesh.edge_lengths[e]
        return fluxes

    @staticmethod
    def cell_divergence(mesh: PolygonalMesh, sigma_dofs: np.ndarray, cell_areas: np.ndarray) -> np.ndarray:
        """セルごとの div σ_h = (1/|E|) Σ_j |e_j| s_j g_e"""
        divergence = np.empty(mesh.n_cells)
        for c, entries in enumerate(mesh.cell_edges):
            total = sum(mesh.edge_lengths[e] * s * sigma_dofs[e] for e, s in entries)
            divergence[c] = total / cell_areas[c]
        return divergence

    @staticmethod
    def dump_matrix_market(system: SaddlePointSystem, path: str) -> Path:
        """Matrix Market 座標形式で書き出す"""
        file_path = Path(path)
        if file_path.suffix != ".mtx":
            file_path = file_path.with_name(file_path.name + ".mtx")
        file_path.parent.mkdir(parents=True, exist_ok=True)
        mmwrite(str(file_path), system.matrix, comment=f"mixvem saddle-point system ({system.method})")
        logger.info(f"行列を書き出しました: {file_path}")
        return file_path
