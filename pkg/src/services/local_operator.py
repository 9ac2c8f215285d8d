import logging
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import eigh

from ..core.config import settings
from ..core.exceptions import (
    DegenerateCellException,
    DegenerateElementException,
    ElementAssemblyException,
    GeometryException,
    QuadratureException,
)
from ..models.data_models import (
    CoercivityReport,
    ElementGeometry,
    HarmonicGradientBasis,
    HarmonicQuadratic,
    HourglassVector,
    LocalDofMap,
    LocalSystem,
    Method,
    PolygonalMesh,
    ProjectionPack,
)
from .harmonic_basis import HarmonicBasisService
from .mesh_service import MeshService

logger = logging.getLogger(__name__)

VectorField = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
ScalarField = Callable[[np.ndarray, np.ndarray], np.ndarray]


def choose_k(n_edges: int) -> int:
    """2k ≥ n_E を満たす最小の k"""
    if n_edges < 3:
        raise ValueError(f"辺数は3以上が必要です: {n_edges}")
    return (n_edges + 1) // 2


def _alternating(n: int) -> np.ndarray:
    """(-1)^j, j = 1..n"""
    return np.where(np.arange(1, n + 1) % 2 == 0, 1.0, -1.0)


class LocalOperatorService:
    """要素レベルの射影・双線形形式・砂時計診断を担当するサービス"""

    def __init__(
        self,
        mesh_service: Optional[MeshService] = None,
        basis_service: Optional[HarmonicBasisService] = None
    ):
        self.mesh_service = mesh_service or MeshService()
        self.basis_service = basis_service or HarmonicBasisService(self.mesh_service)
        self.exactness = settings.quadrature_exactness

    # ------------------------------------------------------------ DOF

    @staticmethod
    def local_dof_map(mesh: PolygonalMesh, cell: int) -> LocalDofMap:
        entries = mesh.cell_edges[cell]
        return LocalDofMap(
            cell=cell,
            edges=np.array([e for e, _ in entries], dtype=int),
            signs=np.array([s for _, s in entries], dtype=float),
        )

    @staticmethod
    def local_div(geom: ElementGeometry, dofs: np.ndarray) -> float:
        """div τ = (1/|E|) Σ_j |e_j| c_j"""
        return float(np.dot(geom.edge_lengths, dofs)) / geom.area

    def dofs_of_field(self, geom: ElementGeometry, field: VectorField, n_points: int = 4) -> np.ndarray:
        """ベクトル場の辺平均法線フラックス c_j = (1/|e_j|) ∫_{e_j} τ·n_j"""
        coords = geom.vertex_coords
        nxt = np.roll(coords, -1, axis=0)
        dofs = np.empty(geom.n_edges)
        for j in range(geom.n_edges):
            rule = self.basis_service.edge_gauss((coords[j], nxt[j]), n_points)
            sx, sy = field(rule.points[:, 0], rule.points[:, 1])
            normal = geom.outward_normals[j]
            flux = np.broadcast_to(sx, rule.weights.shape) * normal[0] \
                + np.broadcast_to(sy, rule.weights.shape) * normal[1]
            dofs[j] = np.dot(rule.weights, flux) / geom.edge_lengths[j]
        return dofs

    @staticmethod
    def constant_field_dofs(geom: ElementGeometry, direction: np.ndarray) -> np.ndarray:
        return geom.outward_normals @ np.asarray(direction, dtype=float)

    # ------------------------------------------------------------ projections

    def projection_pack(self, geom: ElementGeometry, basis: Optional[HarmonicGradientBasis] = None) -> ProjectionPack:
        """Π̂ の G, B, P = G⁻¹B と Π⁰ の列 P0"""
        if basis is None:
            basis = self.basis_service.harmonic_basis(geom, choose_k(geom.n_edges))
        G = self.basis_service.gram_matrix_boundary(basis)
        integrals = self.basis_service.member_integrals(basis)

        coords = geom.vertex_coords
        nxt = np.roll(coords, -1, axis=0)
        edge_integrals = np.empty((basis.size, geom.n_edges))
        for j in range(geom.n_edges):
            rule = self.basis_service.edge_gauss((coords[j], nxt[j]), basis.degree + 1)
            edge_integrals[:, j] = self.basis_service.evaluate(basis, rule.points) @ rule.weights

        # B_ij = ∫_{e_j} p_i ds − (|e_j|/|E|) ∫_E p_i dA
        B = edge_integrals - np.outer(integrals, geom.edge_lengths) / geom.area
        P = np.linalg.solve(G, B)
        # Π⁰φ_j = |e_j| (M_j − x_E) / |E|
        P0 = ((geom.edge_midpoints - geom.centroid) * geom.edge_lengths[:, None]).T / geom.area

        return ProjectionPack(k=basis.degree, G=G, B=B, P=P, P0=P0, member_integrals=integrals)

    @staticmethod
    def a_stabfree(geom: ElementGeometry, pack: ProjectionPack) -> np.ndarray:
        """A_E = Pᵀ G P"""
        A = pack.P.T @ pack.G @ pack.P
        return 0.5 * (A + A.T)

    @staticmethod
    def constant_projection_dofs(geom: ElementGeometry, pack: ProjectionPack) -> np.ndarray:
        """𝚷⁰_ij = dof_i(Π⁰φ_j) = n_i·Π⁰φ_j"""
        return geom.outward_normals @ pack.P0

    @staticmethod
    def drecipe_scaling(geom: ElementGeometry, pack: ProjectionPack) -> np.ndarray:
        """D_ii = max(h_E |e_i|, ‖Π⁰φ_i‖²_{0,E})"""
        norms = geom.area * np.einsum("ij,ij->j", pack.P0, pack.P0)
        return np.maximum(geom.diameter * geom.edge_lengths, norms)

    def a_drecipe(self, geom: ElementGeometry, pack: ProjectionPack) -> np.ndarray:
        """定数射影による整合項と D-recipe 安定化項の和"""
        consistency = geom.area * pack.P0.T @ pack.P0
        projector = self.constant_projection_dofs(geom, pack)
        complement = np.eye(geom.n_edges) - projector
        D = self.drecipe_scaling(geom, pack)
        A = consistency + complement.T @ (D[:, None] * complement)
        return 0.5 * (A + A.T)

    def local_matrix(self, geom: ElementGeometry, pack: ProjectionPack, method: Method) -> np.ndarray:
        if method == "stabfree":
            return self.a_stabfree(geom, pack)
        if method == "drecipe":
            return self.a_drecipe(geom, pack)
        raise ValueError(f"未知の手法です: {method}")

    def local_rhs(self, geom: ElementGeometry, f: ScalarField) -> float:
        """∫_E f dA"""
        rule = self.basis_service.polygon_quadrature(geom, self.exactness)
        values = np.broadcast_to(f(rule.points[:, 0], rule.points[:, 1]), rule.weights.shape)
        return float(np.dot(rule.weights, values))

    @staticmethod
    def projected_coefficients(pack: ProjectionPack, dofs: np.ndarray) -> np.ndarray:
        """Π̂τ の基底係数 q = P·dofs"""
        return pack.P @ dofs

    def projected_norm_squared(self, basis: HarmonicGradientBasis, pack: ProjectionPack, dofs: np.ndarray) -> float:
        """多角形求積による ‖Π̂τ‖²_{0,E}"""
        q = self.projected_coefficients(pack, dofs)
        rule = self.basis_service.polygon_quadrature(basis.geometry, max(2 * basis.degree - 2, 0))
        gx, gy = self.basis_service.gradient(basis, rule.points)
        vx, vy = q @ gx, q @ gy
        return float(np.dot(rule.weights, vx * vx + vy * vy))

    def gradient_field(self, basis: HarmonicGradientBasis, coefficients: np.ndarray) -> VectorField:
        """Σ q_i ∇p_i を評価可能なベクトル場として返す"""
        def field(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            gx, gy = self.basis_service.gradient(basis, np.column_stack([x, y]))
            return coefficients @ gx, coefficients @ gy
        return field

    def reproduction_residual(
        self,
        basis: HarmonicGradientBasis,
        pack: ProjectionPack,
        coefficients: np.ndarray
    ) -> float:
        """∇H_k ∩ Σ_h(E) の場を自由度化して Π̂ で戻した係数の誤差"""
        field = self.gradient_field(basis, coefficients)
        dofs = self.dofs_of_field(basis.geometry, field, basis.degree + 1)
        return float(np.max(np.abs(self.projected_coefficients(pack, dofs) - coefficients)))

    # ------------------------------------------------------------ hourglass

    @staticmethod
    def _require_quad(geom: ElementGeometry) -> None:
        if geom.n_edges != 4:
            raise GeometryException(f"砂時計モードは四角形でのみ定義されます（辺数 {geom.n_edges}）")

    def hourglass_vector(self, geom: ElementGeometry) -> HourglassVector:
        """ξ·n_j = (−1)^j / |e_j|"""
        self._require_quad(geom)
        return HourglassVector(dofs=_alternating(4) / geom.edge_lengths)

    def hourglass_orthogonality(self, geom: ElementGeometry) -> np.ndarray:
        """((ξ, e_x)_E, (ξ, e_y)_E) を境界公式で計算"""
        xi = self.hourglass_vector(geom).dofs
        # (τ, a)_E = Σ_j c_j |e_j| a·(M_j − x_E)
        return (xi * geom.edge_lengths) @ (geom.edge_midpoints - geom.centroid)

    def pstar(self, geom: ElementGeometry) -> HarmonicQuadratic:
        """辺中点で (−1)^j をとる調和2次多項式"""
        self._require_quad(geom)
        corners, area = self.mesh_service.midpoint_parallelogram(geom)
        if area <= 1e-14 * geom.diameter ** 2:
            raise GeometryException(f"中点平行四辺形が退化しています（面積 {area:.3e}）")
        mids = corners[:, 0] + 1j * corners[:, 1]
        z1 = complex(mids[1] - mids[0])
        z2 = complex(mids[3] - mids[0])
        product = z1 * z2
        return HarmonicQuadratic(
            origin=complex(mids[0]),
            z1=z1,
            z2=z2,
            alpha=2.0 * (z1 + z2) / product,
            beta=-2.0 / product,
        )

    @staticmethod
    def pstar_values(pstar: HarmonicQuadratic, points: np.ndarray) -> np.ndarray:
        z = points[..., 0] + 1j * points[..., 1] - pstar.origin
        return np.real(-1.0 + pstar.alpha * z + pstar.beta * z * z)

    def pstar_coefficients(self, geom: ElementGeometry, pstar: HarmonicQuadratic, k: int) -> np.ndarray:
        """∇p* の基底係数 q*（k ≥ 2）"""
        if k < 2:
            raise ValueError(f"p* の表現には k ≥ 2 が必要です: {k}")
        h = geom.diameter
        d = complex(geom.centroid[0], geom.centroid[1]) - pstar.origin
        # q = const + c1 w + c2 w²,  w = (ζ − z_E)/h_E
        c1 = h * (pstar.alpha + 2.0 * pstar.beta * d)
        c2 = pstar.beta * h * h
        coefficients = np.zeros(2 * k)
        coefficients[:4] = [c1.real, -c1.imag, c2.real, -c2.imag]
        return coefficients

    def hourglass_pairing(self, geom: ElementGeometry, pack: Optional[ProjectionPack] = None) -> Tuple[float, float]:
        """(ξ, ∇p*)_E を射影行列経由と辺求積の直接計算の両方で返す"""
        if pack is None:
            pack = self.projection_pack(geom)
        xi = self.hourglass_vector(geom).dofs
        ps = self.pstar(geom)
        q = self.pstar_coefficients(geom, ps, pack.k)
        via_projection = float(q @ pack.B @ xi)

        coords = geom.vertex_coords
        nxt = np.roll(coords, -1, axis=0)
        direct = 0.0
        for j in range(4):
            rule = self.basis_service.edge_gauss((coords[j], nxt[j]), 2)
            direct += xi[j] * float(np.dot(rule.weights, self.pstar_values(ps, rule.points)))
        return via_projection, direct

    def kernel_coercivity_report(
        self,
        geom: ElementGeometry,
        pack: Optional[ProjectionPack] = None,
        method: Method = "stabfree"
    ) -> CoercivityReport:
        """発散ゼロ部分空間（定数 ⊕ 砂時計）上のレイリー商"""
        if pack is None:
            pack = self.projection_pack(geom)
        A = self.local_matrix(geom, pack, method)
        xi = self.hourglass_vector(geom).dofs
        Z = np.column_stack([
            self.constant_field_dofs(geom, (1.0, 0.0)),
            self.constant_field_dofs(geom, (0.0, 1.0)),
            xi,
        ])
        energy = Z.T @ A @ Z
        energy = 0.5 * (energy + energy.T)
        surrogate = geom.diameter * float(np.sum(geom.edge_lengths * xi * xi))
        mass = np.diag([geom.area, geom.area, surrogate])

        rayleigh = eigh(energy, mass, eigvals_only=True)
        constants = eigh(energy[:2, :2], mass[:2, :2], eigvals_only=True)
        hourglass_energy = float(energy[2, 2])
        return CoercivityReport(
            rayleigh_min=float(rayleigh.min()),
            projection_ratio=float(np.sqrt(max(hourglass_energy, 0.0) / surrogate)),
            hourglass_energy=hourglass_energy,
            hourglass_surrogate=surrogate,
            constants_quotient=float(constants.min()),
        )

    def kernel_coercivity_scan(self, geom: ElementGeometry) -> float:
        return self.kernel_coercivity_report(geom).rayleigh_min

    # ------------------------------------------------------------ element system

    def local_system(
        self,
        mesh: PolygonalMesh,
        cell: int,
        method: Method,
        f: ScalarField
    ) -> LocalSystem:
        """セルの A_E、発散行、右辺、射影をまとめて計算"""
        try:
            geom = self.mesh_service.element_geometry(mesh, cell)
            pack = self.projection_pack(geom)
            A = self.local_matrix(geom, pack, method)
            rhs = -self.local_rhs(geom, f)
        except DegenerateElementException as e:
            raise DegenerateElementException(f"セル {cell}: {str(e)}", cell=cell, condition=e.condition)
        except (DegenerateCellException, QuadratureException, np.linalg.LinAlgError) as e:
            raise ElementAssemblyException(f"セル {cell} の要素計算に失敗しました: {str(e)}", cell=cell)

        return LocalSystem(
            dof_map=self.local_dof_map(mesh, cell),
            A=A,
            divrow=geom.edge_lengths.copy(),
            rhs=rhs,
            area=geom.area,
            pack=pack,
        )
