import logging
from typing import List, Optional

import numpy as np

from ..core.exceptions import DiagnosticsException
from ..models.data_models import DiagnosticsReport, PolygonalMesh
from .local_operator import LocalOperatorService
from .mesh_generator import MeshGenerator

logger = logging.getLogger(__name__)

PAIRING_VALUE = 8.0 / 3.0
PAIRING_TOL = 1e-10
ORTHOGONALITY_TOL = 1e-12
REPRODUCTION_TOL = 1e-12
CONTINUITY_TOL = 1e-11
COERCIVITY_FLOOR = 1e-3


class DiagnosticsService:
    """ランダム四角形上で砂時計・p*・射影の恒等式を検査するサービス"""

    def __init__(
        self,
        mesh_generator: Optional[MeshGenerator] = None,
        local_operator: Optional[LocalOperatorService] = None
    ):
        self.mesh_generator = mesh_generator or MeshGenerator()
        self.local_operator = local_operator or LocalOperatorService(self.mesh_generator.mesh_service)
        self.mesh_service = self.local_operator.mesh_service
        self.basis_service = self.local_operator.basis_service

    def run(self, count: int = 100, rng_seed: int = 0, min_gamma: float = 0.2) -> DiagnosticsReport:
        """count 個のランダム四角形で各恒等式の最悪値を集計"""
        rng = np.random.default_rng(rng_seed)
        pairings, deviations, orthogonality = [], [], []
        reproduction, continuity, coercivity = [], [], []

        for _ in range(count):
            mesh = self.mesh_generator.generate_random_quadrilateral(rng, min_gamma)
            geom = self.mesh_service.element_geometry(mesh, 0)
            pack = self.local_operator.projection_pack(geom)
            basis = self.basis_service.harmonic_basis(geom, pack.k)

            via_projection, direct = self.local_operator.hourglass_pairing(geom, pack)
            pairings.append(via_projection)
            deviations.append(abs(via_projection - direct))
            orthogonality.append(float(np.max(np.abs(self.local_operator.hourglass_orthogonality(geom)))))

            # 定数場は ∇m_x, ∇m_y の係数で表される
            reproduction.append(max(
                self.local_operator.reproduction_residual(basis, pack, np.eye(basis.size)[i])
                for i in range(2)
            ))

            tau = rng.normal(size=geom.n_edges)
            energy = float(tau @ self.local_operator.a_stabfree(geom, pack) @ tau)
            projected = self.local_operator.projected_norm_squared(basis, pack, tau)
            continuity.append(abs(energy - projected) / max(projected, np.finfo(float).tiny))

            coercivity.append(self.local_operator.kernel_coercivity_report(geom, pack).rayleigh_min)

        pairings_arr = np.array(pairings)
        report = DiagnosticsReport(
            count=count,
            pairing_min=float(pairings_arr.min()),
            pairing_max=float(pairings_arr.max()),
            pairing_direct_max_deviation=float(max(deviations)),
            orthogonality_max=float(max(orthogonality)),
            reproduction_max=float(max(reproduction)),
            continuity_max=float(max(continuity)),
            coercivity_min=float(min(coercivity)),
            failures=[],
        )
        failures = self._failures(report)
        if failures:
            logger.warning(f"診断で {len(failures)} 件の恒等式違反がありました")
        return report.model_copy(update={"failures": failures})

    @staticmethod
    def _failures(report: DiagnosticsReport) -> List[str]:
        failures = []
        pairing_error = max(abs(report.pairing_min - PAIRING_VALUE), abs(report.pairing_max - PAIRING_VALUE))
        if pairing_error > PAIRING_TOL:
            failures.append(f"(ξ, ∇p*) が 8/3 から {pairing_error:.3e} ずれています")
        if report.pairing_direct_max_deviation > PAIRING_TOL:
            failures.append(f"射影経由と直接計算の (ξ, ∇p*) が {report.pairing_direct_max_deviation:.3e} 食い違います")
        if report.orthogonality_max > ORTHOGONALITY_TOL:
            failures.append(f"(ξ, a) の最大値 {report.orthogonality_max:.3e} が許容値を超えています")
        if report.reproduction_max > REPRODUCTION_TOL:
            failures.append(f"定数場の再現誤差 {report.reproduction_max:.3e} が許容値を超えています")
        if report.continuity_max > CONTINUITY_TOL:
            failures.append(f"a_h(τ,τ) と ‖Π̂τ‖² の相対差 {report.continuity_max:.3e} が許容値を超えています")
        if report.coercivity_min < COERCIVITY_FLOOR:
            failures.append(f"核上の強圧性 {report.coercivity_min:.3e} が下限 {COERCIVITY_FLOOR} 未満です")
        return failures

    @staticmethod
    def require(report: DiagnosticsReport) -> DiagnosticsReport:
        if not report.passed:
            raise DiagnosticsException("診断チェックに失敗しました", failures=report.failures)
        return report

    def mesh_coercivity_min(self, mesh: PolygonalMesh) -> float:
        """メッシュ中の全四角形セルでの核上レイリー商の最小値"""
        values = []
        for c in range(mesh.n_cells):
            geom = self.mesh_service.element_geometry(mesh, c)
            if geom.n_edges == 4:
                values.append(self.local_operator.kernel_coercivity_scan(geom))
        return float(min(values)) if values else float("nan")
